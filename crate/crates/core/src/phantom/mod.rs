//! Synthetic "body" volumes with a known latent coordinate per slice.
//!
//! A slice at latent coordinate `z ∈ [0, 1]` shows a body ellipse, a central
//! disc whose brightness grows with `z`, a ring whose radius grows with `z`,
//! and a row of bars that fade in one after another as `z` increases. Every
//! structure varies continuously in `z`, so neighbouring coordinates give
//! similar images and distant ones give different images.

mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UbrError};
use crate::rng::Rng;

pub use dataset::{
    band_of, encode_volume, generate_dataset, read_labels, read_latent_sidecar, read_manifest, read_volume, write_labels, write_latent_sidecar,
    write_manifest, write_volume, Dataset, LabelRecord, ManifestEntry, LABELS_FILE, LATENT_SIDECAR_FILE, MANIFEST_FILE, VOLUME_MAGIC,
    VOLUME_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Slice height and width in pixels.
    pub image_size: [usize; 2],
    /// Inclusive range of slice counts per volume.
    pub slices_range: [usize; 2],
    /// Range for the fraction of the latent axis one volume covers.
    pub span_range: [f64; 2],
    /// Relative perturbation of the latent step, drawn once per volume.
    pub spacing_jitter: f64,
    pub noise_sigma: f64,
    /// Maximum in-plane shift in pixels.
    pub translate_max: f64,
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: [32, 32],
            slices_range: [40, 200],
            span_range: [0.3, 1.0],
            spacing_jitter: 0.1,
            noise_sigma: 0.05,
            translate_max: 4.0,
            scale_range: [0.9, 1.1],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(UbrError::InvalidConfig(format!("phantom: {msg}")));
        let [lo, hi] = self.slices_range;
        if lo < 2 || lo > hi {
            return bad("slices_range must satisfy 2 ≤ min ≤ max");
        }
        let [a, b] = self.span_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad("span_range must satisfy 0 < min ≤ max ≤ 1");
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image_size must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.translate_max >= 0.0) || !(0.0..1.0).contains(&self.spacing_jitter) {
            return bad("noise_sigma and translate_max must be ≥ 0 and spacing_jitter in [0, 1)");
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad("scale_range must satisfy 0 < min ≤ max");
        }
        Ok(())
    }

    fn slice_len(&self) -> usize {
        self.image_size[0] * self.image_size[1]
    }
}

/// In-plane placement of the body within a slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

impl Pose {
    pub const CENTERED: Pose = Pose {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
    };

    pub fn sample(spec: &PhantomSpec, rng: &mut Rng) -> Pose {
        let t = spec.translate_max;
        let [s0, s1] = spec.scale_range;
        Pose {
            dx: if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
            dy: if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
            scale: if s1 > s0 { rng.random_range(s0..=s1) } else { s0 },
        }
    }
}

const BODY_AXES: (f64, f64) = (0.82, 0.66);
const BODY_LEVEL: f64 = 0.2;
const DISC_RADIUS: f64 = 0.14;
const RING_HALF_WIDTH: f64 = 0.05;
const RING_LEVEL: f64 = 0.35;
const BAR_COUNT: usize = 4;
const BAR_LEVEL: f64 = 0.3;
const BAR_FADE: f64 = 0.1;

fn disc_level(z: f64) -> f64 {
    0.15 + 0.55 * z
}

fn ring_radius(z: f64) -> f64 {
    0.22 + 0.36 * z
}

/// Opacity of bar `i`: fully visible once `z ≥ i/4`, fading in over the
/// preceding `BAR_FADE`.
fn bar_fade(i: usize, z: f64) -> f64 {
    ((z - 0.25 * i as f64) / BAR_FADE + 1.0).clamp(0.0, 1.0)
}

/// Number of distinct structures drawn at `z`; independent of pose and noise.
pub fn structure_census(z: f64) -> usize {
    3 + (0..BAR_COUNT).filter(|&i| bar_fade(i, z) > 0.0).count()
}

/// Noise-free rendering of the structures at `z` under `pose`.
pub fn render_structure(z: f64, pose: Pose, size: [usize; 2]) -> Vec<f64> {
    let z = z.clamp(0.0, 1.0);
    let [h, w] = size;
    let half = 0.5 * h.min(w) as f64 * pose.scale;
    // one-and-a-half pixel soft edge, in normalised units
    let edge = 1.5 / half;
    let cover = |d: f64| (0.5 - d / edge).clamp(0.0, 1.0);
    let ring_r = ring_radius(z);
    let disc = disc_level(z);
    let fades: Vec<f64> = (0..BAR_COUNT).map(|i| bar_fade(i, z)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5 - 0.5 * w as f64 - pose.dx) / half;
            let v = (y as f64 + 0.5 - 0.5 * h as f64 - pose.dy) / half;
            let r = (u * u + v * v).sqrt();
            let (ea, eb) = BODY_AXES;
            let body = ((u / ea).powi(2) + (v / eb).powi(2)).sqrt();
            let mut value = BODY_LEVEL * cover((body - 1.0) * ea.min(eb));
            value += disc * cover(r - DISC_RADIUS);
            value += RING_LEVEL * cover((r - ring_r).abs() - RING_HALF_WIDTH);
            for (i, &fade) in fades.iter().enumerate() {
                if fade > 0.0 {
                    let cu = -0.39 + 0.26 * i as f64;
                    let d = ((u - cu).abs() - 0.05).max((v - 0.42).abs() - 0.12);
                    value += BAR_LEVEL * fade * cover(d);
                }
            }
            out.push(value);
        }
    }
    out
}

fn add_noise(image: &mut [f64], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for p in image.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    for p in image.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

/// Renders one slice at `z` with a freshly drawn pose and noise.
pub fn render_slice(z: f64, spec: &PhantomSpec, rng: &mut Rng) -> Vec<f64> {
    let pose = Pose::sample(spec, rng);
    render_slice_with_pose(z, spec, pose, rng)
}

/// Renders one slice at `z` under a given pose; only the noise is random.
pub fn render_slice_with_pose(z: f64, spec: &PhantomSpec, pose: Pose, rng: &mut Rng) -> Vec<f64> {
    let mut image = render_structure(z, pose, spec.image_size);
    add_noise(&mut image, spec.noise_sigma, rng);
    image
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnomalyClass {
    ReversedSegment,
    DuplicatedSlices,
    Shuffled,
    CorruptedSlices,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; 4] = [
        AnomalyClass::ReversedSegment,
        AnomalyClass::DuplicatedSlices,
        AnomalyClass::Shuffled,
        AnomalyClass::CorruptedSlices,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyClass::ReversedSegment => "reversed-segment",
            AnomalyClass::DuplicatedSlices => "duplicated-slices",
            AnomalyClass::Shuffled => "shuffled",
            AnomalyClass::CorruptedSlices => "corrupted-slices",
        }
    }
}

impl fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyClass {
    type Err = UbrError;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UbrError::InvalidArgument(format!("unknown anomaly kind `{s}`")))
    }
}

impl Serialize for AnomalyClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AnomalyClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A concrete anomaly with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnomalyKind {
    /// Reverses slices `start..start + len` together with their latents.
    ReversedSegment { start: usize, len: usize },
    /// Inserts a copy of slices `start..start + len` right after the block.
    DuplicatedSlices { start: usize, len: usize },
    /// Randomly permutes every slice.
    Shuffled,
    /// Overwrites slices `start..start + len` with high-amplitude stripes.
    CorruptedSlices { start: usize, len: usize, amplitude: f64 },
}

impl AnomalyKind {
    pub fn class(&self) -> AnomalyClass {
        match self {
            AnomalyKind::ReversedSegment { .. } => AnomalyClass::ReversedSegment,
            AnomalyKind::DuplicatedSlices { .. } => AnomalyClass::DuplicatedSlices,
            AnomalyKind::Shuffled => AnomalyClass::Shuffled,
            AnomalyKind::CorruptedSlices { .. } => AnomalyClass::CorruptedSlices,
        }
    }

    /// Draws parameters for `class` on a volume of `n` slices. Reversals cover
    /// at least 30% of the volume (a quarter of them all of it), duplicated
    /// blocks 20–40%, corrupted blocks 10–30%.
    pub fn sample(class: AnomalyClass, n: usize, rng: &mut Rng) -> AnomalyKind {
        let frac = |f: f64| ((f * n as f64).ceil() as usize).clamp(1, n);
        let block = |lo: f64, hi: f64, rng: &mut Rng| {
            let len = rng.random_range(frac(lo)..=frac(hi));
            (rng.random_range(0..=n - len), len)
        };
        match class {
            AnomalyClass::ReversedSegment => {
                if rng.random_bool(0.25) {
                    AnomalyKind::ReversedSegment { start: 0, len: n }
                } else {
                    let (start, len) = block(0.3, 1.0, rng);
                    AnomalyKind::ReversedSegment { start, len }
                }
            }
            AnomalyClass::DuplicatedSlices => {
                let (start, len) = block(0.2, 0.4, rng);
                AnomalyKind::DuplicatedSlices { start, len }
            }
            AnomalyClass::Shuffled => AnomalyKind::Shuffled,
            AnomalyClass::CorruptedSlices => {
                let (start, len) = block(0.1, 0.3, rng);
                AnomalyKind::CorruptedSlices { start, len, amplitude: 1.0 }
            }
        }
    }
}

/// An ordered slice stack. `latent` is the held-out ground truth and is only
/// present for generated volumes or after attaching a sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Latent step between consecutive slices.
    pub spacing: f64,
    /// `n · H · W` intensities in `[0, 1]`, slice-major.
    pub slices: Vec<f64>,
    pub latent: Option<Vec<f64>>,
    pub anomaly: Option<AnomalyClass>,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.slices.len() / self.slice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let len = self.slice_len();
        &self.slices[i * len..(i + 1) * len]
    }

    /// Applies a permutation: new slice `k` is old slice `order[k]`.
    fn reorder(&mut self, order: &[usize]) {
        let len = self.slice_len();
        let mut slices = Vec::with_capacity(order.len() * len);
        for &i in order {
            slices.extend_from_slice(self.slice(i));
        }
        self.slices = slices;
        if let Some(z) = self.latent.as_mut() {
            *z = order.iter().map(|&i| z[i]).collect();
        }
    }
}

/// Draws a normal volume: slice count, covered interval `[a, b]`, a constant
/// latent step, one pose, then renders every slice.
pub fn generate_volume(id: impl Into<String>, spec: &PhantomSpec, rng: &mut Rng) -> Result<Volume> {
    spec.validate()?;
    let [lo, hi] = spec.slices_range;
    let n = rng.random_range(lo..=hi);
    let [s0, s1] = spec.span_range;
    let span = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 };
    let jitter = if spec.spacing_jitter > 0.0 {
        1.0 + spec.spacing_jitter * rng.random_range(-1.0..=1.0)
    } else {
        1.0
    };
    let step = (span * jitter).min(1.0) / (n - 1) as f64;
    let covered = step * (n - 1) as f64;
    // Centre uniform on [0, 1], clamped so the interval stays inside the axis;
    // the clamping puts positive mass on both ends of the axis.
    let centre: f64 = rng.random_range(0.0..=1.0);
    let a = (centre - 0.5 * covered).clamp(0.0, (1.0 - covered).max(0.0));
    let latent: Vec<f64> = (0..n).map(|i| a + step * i as f64).collect();
    let pose = Pose::sample(spec, rng);
    let mut slices = Vec::with_capacity(n * spec.slice_len());
    for &z in &latent {
        slices.extend(render_slice_with_pose(z, spec, pose, rng));
    }
    Ok(Volume {
        id: id.into(),
        height: spec.image_size[0],
        width: spec.image_size[1],
        spacing: step,
        slices,
        latent: Some(latent),
        anomaly: None,
    })
}

fn check_block(kind: &str, start: usize, len: usize, n: usize, min_len: usize) -> Result<()> {
    if len < min_len || start + len > n {
        return Err(UbrError::InvalidArgument(format!(
            "{kind} block {start}..{} does not fit a {n}-slice volume (minimum length {min_len})",
            start + len
        )));
    }
    Ok(())
}

pub fn inject_anomaly(mut volume: Volume, kind: AnomalyKind, rng: &mut Rng) -> Result<Volume> {
    let n = volume.len();
    match kind {
        AnomalyKind::ReversedSegment { start, len } => {
            check_block("reversed", start, len, n, 2)?;
            let mut order: Vec<usize> = (0..n).collect();
            order[start..start + len].reverse();
            volume.reorder(&order);
        }
        AnomalyKind::DuplicatedSlices { start, len } => {
            check_block("duplicated", start, len, n, 1)?;
            let order: Vec<usize> = (0..start + len).chain(start..n).collect();
            volume.reorder(&order);
        }
        AnomalyKind::Shuffled => {
            if n < 2 {
                return Err(UbrError::InvalidArgument("cannot shuffle fewer than 2 slices".into()));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            volume.reorder(&order);
        }
        AnomalyKind::CorruptedSlices { start, len, amplitude } => {
            check_block("corrupted", start, len, n, 1)?;
            if !(amplitude > 0.0) {
                return Err(UbrError::InvalidArgument("corruption amplitude must be positive".into()));
            }
            let (h, w) = (volume.height, volume.width);
            let slice_len = volume.slice_len();
            for s in start..start + len {
                let period = rng.random_range(2.0..6.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let horizontal = rng.random_bool(0.5);
                let dst = &mut volume.slices[s * slice_len..(s + 1) * slice_len];
                for y in 0..h {
                    for x in 0..w {
                        let t = if horizontal { y } else { x } as f64;
                        let stripe = 0.5 + 0.5 * (std::f64::consts::TAU * t / period + phase).sin();
                        let noise = rng.random_range(-0.5..0.5);
                        dst[y * w + x] = (amplitude * (stripe + noise)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    volume.anomaly = Some(kind.class());
    Ok(volume)
}
