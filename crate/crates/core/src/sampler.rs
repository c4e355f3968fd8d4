//! Training groups: `g` volumes, `m` equidistant slices from each.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Result, UbrError};
use crate::phantom::Dataset;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Volumes per group.
    pub g: usize,
    /// Slices per volume.
    pub m: usize,
    pub seed: u64,
    /// Upper bound on the slice interval `k`.
    pub max_interval: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            g: 6,
            m: 8,
            seed: 0,
            max_interval: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g < 1 || self.m < 2 {
            return Err(UbrError::InvalidConfig(format!("sampler needs g ≥ 1 and m ≥ 2, got g={} m={}", self.g, self.m)));
        }
        if self.max_interval == Some(0) {
            return Err(UbrError::InvalidConfig("sampler max_interval must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Equidistant ascending slice indices taken from one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceList {
    volume: usize,
    indices: Vec<usize>,
}

impl SliceList {
    /// `volume` is a position in the dataset. Indices must ascend with one
    /// common step.
    pub fn new(volume: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(UbrError::InvalidArgument("a slice list needs at least 2 indices".into()));
        }
        let k = indices[1].wrapping_sub(indices[0]);
        if indices[1] <= indices[0] || indices.windows(2).any(|w| w[1] <= w[0] || w[1] - w[0] != k) {
            return Err(UbrError::InvalidArgument(format!("slice indices {indices:?} are not ascending and equidistant")));
        }
        Ok(SliceList { volume, indices })
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn start(&self) -> usize {
        self.indices[0]
    }

    pub fn interval(&self) -> usize {
        self.indices[1] - self.indices[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub entries: Vec<SliceList>,
    /// `[g·m, 1, H, W]`, volume-major then ascending slice index.
    pub pixels: Tensor,
}

/// Largest feasible interval for `n` slices and `m` picks.
pub fn max_feasible_interval(n: usize, m: usize, cap: Option<usize>) -> usize {
    let k = (n - 1) / (m - 1);
    cap.map_or(k, |c| k.min(c))
}

/// Draws `(k, j)` for one volume of `n ≥ m` slices.
pub fn draw_interval_and_start(n: usize, m: usize, cap: Option<usize>, rng: &mut Rng) -> (usize, usize) {
    let k = rng.random_range(1..=max_feasible_interval(n, m, cap));
    let j = rng.random_range(0..=n - 1 - k * (m - 1));
    (k, j)
}

/// Picks the slice lists of one group without touching pixel data.
pub fn sample_entries(dataset: &Dataset, config: &SamplerConfig, rng: &mut Rng) -> Result<Vec<SliceList>> {
    config.validate()?;
    let m = config.m;
    let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.volumes()[i].len() >= m).collect();
    if eligible.is_empty() {
        let max_len = dataset.volumes().iter().map(|v| v.len()).max().unwrap_or(0);
        return Err(UbrError::NoEligibleVolume { m, max_len });
    }
    (0..config.g)
        .map(|_| {
            let volume = eligible[rng.random_range(0..eligible.len())];
            let (k, j) = draw_interval_and_start(dataset.volumes()[volume].len(), m, config.max_interval, rng);
            SliceList::new(volume, (0..m).map(|i| j + i * k).collect())
        })
        .collect()
}

pub fn sample_group(dataset: &Dataset, config: &SamplerConfig, rng: &mut Rng) -> Result<SampleGroup> {
    let entries = sample_entries(dataset, config, rng)?;
    let pixels = assemble_pixels(dataset, &entries)?;
    Ok(SampleGroup { entries, pixels })
}

pub fn assemble_pixels(dataset: &Dataset, entries: &[SliceList]) -> Result<Tensor> {
    let [h, w] = dataset
        .image_size()
        .ok_or_else(|| UbrError::InvalidArgument("cannot assemble pixels from an empty dataset".into()))?;
    let rows: usize = entries.iter().map(|e| e.indices.len()).sum();
    if rows == 0 {
        return Err(UbrError::InvalidArgument("no slices to assemble".into()));
    }
    let mut data = Vec::with_capacity(rows * h * w);
    for e in entries {
        let v = dataset
            .volumes()
            .get(e.volume)
            .ok_or_else(|| UbrError::UnknownVolume(format!("#{}", e.volume)))?;
        if let Some(&bad) = e.indices.iter().find(|&&i| i >= v.len()) {
            return Err(UbrError::InvalidArgument(format!("slice {bad} is outside volume `{}` of {} slices", v.id, v.len())));
        }
        for &i in &e.indices {
            data.extend_from_slice(v.slice(i));
        }
    }
    Tensor::new(vec![rows, 1, h, w], data)
}
