//! Procedural phantoms and synthetic particle stacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, geodesic_degrees, rotation_from_axis_angle, AxisAngle, sample_uniform_rotation, Rotation, SphereGrid, Vec3};
use crate::parallel::map_indexed;
use crate::particles::{ParticleStack, Pose};
use crate::transforms::{ctf_eval, hartley_2d, hartley_shift, real_projection_oracle, CtfParams, FrequencyGrid, Mask};
use crate::volume::MEVolume;

/// Phantoms whose best nontrivial self-alignment leaves less relative residual than this
/// are rejected as (nearly) symmetric.
pub const ASYMMETRY_THRESHOLD: f64 = 0.2;
/// Rotations closer than this to the identity do not count as self-alignments.
pub const SELF_ALIGNMENT_MIN_DEGREES: f64 = 15.0;
/// Best grid candidates polished by local search in the self-alignment check.
const SELF_ALIGNMENT_REFINED: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Asymmetric,
    /// Blob pairs related by a half turn about z: every view has a twin.
    TwoFold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Offset from the box center, pixels.
    pub center: Vec3,
    /// Principal axes (columns).
    pub axes: Rotation,
    /// Standard deviations along the principal axes, pixels.
    pub widths: Vec3,
    pub amplitude: f64,
}

impl Blob {
    fn eval(&self, p: Vec3) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let q = self.axes.apply_transpose(d);
        let e = (q[0] / self.widths[0]).powi(2) + (q[1] / self.widths[1]).powi(2) + (q[2] / self.widths[2]).powi(2);
        self.amplitude * (-0.5 * e).exp()
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub l: usize,
    pub density: Vec<f64>,
    pub blobs: Vec<Blob>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub n_blobs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n_images: usize,
    pub l: usize,
    /// Angstrom per pixel.
    pub pixel_size: f64,
    pub snr: f64,
    pub defocus_min_um: f64,
    pub defocus_max_um: f64,
    pub voltage_kv: f64,
    pub cs_mm: f64,
    pub amp_contrast: f64,
    pub centered: bool,
    /// Half-width of the uniform shift distribution; `None` means `L/16`.
    pub max_shift_px: Option<f64>,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl SimSpec {
    pub fn new(n_images: usize, l: usize, seed: u64) -> SimSpec {
        SimSpec {
            n_images,
            l,
            pixel_size: 3.0,
            snr: 0.1,
            defocus_min_um: 1.0,
            defocus_max_um: 2.5,
            voltage_kv: 300.0,
            cs_mm: 2.7,
            amp_contrast: 0.1,
            centered: true,
            max_shift_px: None,
            seed,
            phantom: PhantomSpec { kind: PhantomKind::Asymmetric, n_blobs: 50, seed },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_images == 0 {
            return bad("n_images must be at least 1");
        }
        if self.l < 16 || !self.l.is_multiple_of(2) {
            return bad("l must be even and at least 16");
        }
        if !(self.snr > 0.0) {
            return bad("snr must be positive");
        }
        if !(self.pixel_size > 0.0) {
            return bad("pixel_size must be positive");
        }
        if !(self.defocus_min_um > 0.0 && self.defocus_max_um >= self.defocus_min_um) {
            return bad("defocus range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.amp_contrast) || self.voltage_kv <= 0.0 || self.cs_mm < 0.0 {
            return bad("optics parameters out of range");
        }
        if self.phantom.n_blobs < 3 {
            return bad("phantom needs at least 3 blobs");
        }
        Ok(())
    }

    pub fn max_shift(&self) -> f64 {
        self.max_shift_px.unwrap_or(self.l as f64 / 16.0)
    }
}

fn random_blob(l: usize, rng: &mut ChaCha8Rng) -> Blob {
    let lf = l as f64;
    let reach = lf / 8.0;
    let center = loop {
        let c: Vec3 = std::array::from_fn(|_| rng.random_range(-reach..reach));
        if dot(c, c) <= reach * reach {
            break c;
        }
    };
    Blob {
        center,
        axes: sample_uniform_rotation(rng),
        widths: std::array::from_fn(|_| rng.random_range(lf / 48.0..lf / 24.0)),
        amplitude: rng.random_range(0.5..1.5),
    }
}

fn rasterize(l: usize, blobs: &[Blob]) -> Vec<f64> {
    let h = (l / 2) as f64;
    let plane: Vec<Vec<f64>> = map_indexed(l, |z| {
        let mut out = vec![0.0; l * l];
        for y in 0..l {
            for x in 0..l {
                let p = [x as f64 - h, y as f64 - h, z as f64 - h];
                out[y * l + x] = blobs.iter().map(|b| b.eval(p)).sum();
            }
        }
        out
    });
    plane.concat()
}

impl Phantom {
    pub fn from_blobs(l: usize, blobs: Vec<Blob>, seed: u64) -> Phantom {
        let density = rasterize(l, &blobs);
        Phantom { l, density, blobs, seed }
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        self.blobs.iter().map(|b| b.eval(p)).sum()
    }

    /// Relative L2 mismatch between the phantom and its copy rotated by `q`, sampled on a
    /// coarse grid covering the mass.
    pub fn misfit_under(&self, q: &Rotation) -> f64 {
        let n = 12;
        let reach = self.l as f64 / 4.0;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n * n * n {
            let c = |k: usize| -reach + 2.0 * reach * (k as f64 + 0.5) / n as f64;
            let p = [c(i % n), c((i / n) % n), c(i / (n * n))];
            let a = self.eval(p);
            let b = self.eval(q.apply_transpose(p));
            num += (a - b).powi(2);
            den += a * a;
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Smallest misfit over rotations at least [`SELF_ALIGNMENT_MIN_DEGREES`] away from
    /// the identity: a sphere-grid scan followed by local search from the best cells.
    pub fn self_alignment_residual(&self) -> f64 {
        let grid = SphereGrid::new(2);
        let allowed = |q: &Rotation| geodesic_degrees(q, &Rotation::IDENTITY) >= SELF_ALIGNMENT_MIN_DEGREES;
        let mut coarse = Vec::new();
        for d in grid.centers() {
            for k in 0..12 {
                let q = Rotation::from_view(*d, k as f64 * std::f64::consts::PI / 6.0);
                if allowed(&q) {
                    coarse.push((self.misfit_under(&q), q));
                }
            }
        }
        coarse.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best = f64::INFINITY;
        for (mut value, mut q) in coarse.into_iter().take(SELF_ALIGNMENT_REFINED) {
            let mut step = 8f64.to_radians();
            while step > 0.25f64.to_radians() {
                let mut improved = false;
                for axis in 0..6 {
                    let mut w = [0.0; 3];
                    w[axis % 3] = if axis < 3 { step } else { -step };
                    let c = q * rotation_from_axis_angle(AxisAngle(w));
                    if allowed(&c) {
                        let v = self.misfit_under(&c);
                        if v < value {
                            (value, q, improved) = (v, c, true);
                        }
                    }
                }
                if !improved {
                    step /= 2.0;
                }
            }
            best = best.min(value);
        }
        best
    }
}

/// Sum of random anisotropic Gaussians, redrawn until no nontrivial rotation maps it
/// close to itself.
pub fn make_phantom(l: usize, n_blobs: usize, seed: u64) -> Result<Phantom> {
    if n_blobs < 3 {
        return Err(Error::DegenerateInput("phantom needs at least 3 blobs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..64u64 {
        rng.set_stream(attempt);
        let blobs: Vec<Blob> = (0..n_blobs).map(|_| random_blob(l, &mut rng)).collect();
        let candidate = Phantom { l, density: Vec::new(), blobs, seed };
        if candidate.self_alignment_residual() > ASYMMETRY_THRESHOLD {
            return Ok(Phantom::from_blobs(l, candidate.blobs, seed));
        }
    }
    Err(Error::DegenerateInput("could not draw an asymmetric phantom"))
}

/// Blob pairs mapped onto each other by a half turn about z.
pub fn make_twofold_phantom(l: usize, n_pairs: usize, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = Rotation::about_z(std::f64::consts::PI);
    let mut blobs = Vec::with_capacity(2 * n_pairs);
    for _ in 0..n_pairs.max(1) {
        let mut b = random_blob(l, &mut rng);
        // keep the pair apart so the twins stay distinct
        if b.center[0].hypot(b.center[1]) < l as f64 / 24.0 {
            b.center[0] += l as f64 / 16.0;
        }
        let twin = Blob { center: half.apply(b.center), axes: half * b.axes, widths: b.widths, amplitude: b.amplitude };
        blobs.push(b);
        blobs.push(twin);
    }
    Phantom::from_blobs(l, blobs, seed)
}

pub fn phantom_for_spec(spec: &SimSpec) -> Result<Phantom> {
    match spec.phantom.kind {
        PhantomKind::Asymmetric => make_phantom(spec.l, spec.phantom.n_blobs, spec.phantom.seed),
        PhantomKind::TwoFold => Ok(make_twofold_phantom(spec.l, spec.phantom.n_blobs.div_ceil(2), spec.phantom.seed)),
    }
}

/// `sqrt(pooled variance / snr)` over all pixels of the clean images.
pub fn sigma_for_snr(clean_images: &[Vec<f64>], target_snr: f64) -> Result<f64> {
    let count: usize = clean_images.iter().map(|v| v.len()).sum();
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    if !(target_snr > 0.0) {
        return Err(Error::DegenerateInput("target SNR must be positive"));
    }
    let mean = clean_images.iter().flatten().sum::<f64>() / count as f64;
    let var = clean_images.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    Ok((var / target_snr).sqrt())
}

/// Noise-free image of `phantom` under `pose` and `ctf`.
pub fn clean_image(phantom: &Phantom, pose: &Pose, ctf: &CtfParams, pixel_size: f64) -> Vec<f64> {
    let l = phantom.l;
    let projection = real_projection_oracle(&phantom.density, l, &pose.rotation);
    let mut h = hartley_shift(&hartley_2d(&projection, l), pose.translation, l);
    for (v, c) in h.iter_mut().zip(ctf_eval(&FrequencyGrid::new(l, pixel_size), ctf)) {
        *v *= c;
    }
    hartley_2d(&h, l)
}

/// Noise-free image rendered through the slice model of `volume`, band-limited to the
/// largest slicing radius.
pub fn model_image(volume: &MEVolume, pose: &Pose, ctf: &CtfParams) -> Vec<f64> {
    let l = volume.l;
    let mask = Mask::new(l, Mask::max_radius(l));
    let (slice, _) = volume.extract_slice(&pose.rotation, &mask);
    let mut h = hartley_shift(&slice, pose.translation, l);
    for (v, c) in h.iter_mut().zip(ctf_eval(&FrequencyGrid::new(l, volume.pixel_size), ctf)) {
        *v *= c;
    }
    hartley_2d(&h, l)
}

fn image_rng(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + purpose);
    rng
}

/// Projects, shifts, applies CTF and adds white noise at the target SNR.
pub fn synthesize_dataset(phantom: &Phantom, spec: &SimSpec) -> Result<ParticleStack> {
    spec.validate()?;
    if phantom.l != spec.l {
        return Err(Error::DimensionMismatch { expected: spec.l, got: phantom.l });
    }
    let (l, n) = (spec.l, spec.n_images);
    let draws: Vec<(Pose, CtfParams)> = (0..n)
        .map(|i| {
            let mut rng = image_rng(spec.seed, i, 0);
            let rotation = sample_uniform_rotation(&mut rng);
            let defocus = 1e4 * rng.random_range(spec.defocus_min_um..=spec.defocus_max_um);
            let translation = if spec.centered {
                [0.0, 0.0]
            } else {
                let s = spec.max_shift();
                [rng.random_range(-s..=s), rng.random_range(-s..=s)]
            };
            (Pose { rotation, translation }, CtfParams::new(defocus, spec.voltage_kv, spec.cs_mm, spec.amp_contrast))
        })
        .collect();
    let clean = map_indexed(n, |i| clean_image(phantom, &draws[i].0, &draws[i].1, spec.pixel_size));
    let sigma = sigma_for_snr(&clean, spec.snr)?;
    let normal = Normal::new(0.0, sigma).map_err(|_| Error::DegenerateInput("noise sigma"))?;
    let images: Vec<Vec<f64>> = clean
        .into_iter()
        .enumerate()
        .map(|(i, mut img)| {
            let mut rng = image_rng(spec.seed, i, 1);
            img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            img
        })
        .collect();
    debug_assert_eq!(images[0].len(), l * l);
    let (poses, ctf): (Vec<Pose>, Vec<CtfParams>) = draws.into_iter().unzip();
    let mut stack = ParticleStack::new(l, spec.pixel_size, images, ctf)?.with_ground_truth(poses)?;
    stack.sigma_noise = Some(sigma);
    Ok(stack)
}
