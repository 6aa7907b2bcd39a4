//! Spectral density masking.
//!
//! The information density of a spectral region is the mean spectral angle
//! between a cube and a copy whose region bands are flattened to their spatial
//! means. Densities are min-max mapped onto per-channel masking ratios, and the
//! ratios drive a channel-wise random block mask on the RGB input.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi::{cube_to_matrix, BandPartition, RgbImage, SpectralCube, SpectralMatrix};
use crate::metrics::sam;
use crate::seed::derive_seed;

/// Per-region density in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralDensity {
    pub blue: f64,
    pub green: f64,
    pub red: f64,
}

impl SpectralDensity {
    /// Red, green, blue order.
    pub fn as_rgb(&self) -> [f64; 3] {
        [self.red, self.green, self.blue]
    }

    /// Componentwise mean of several densities.
    pub fn mean(items: &[SpectralDensity]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("density list"));
        }
        let n = items.len() as f64;
        Ok(Self {
            blue: items.iter().map(|d| d.blue).sum::<f64>() / n,
            green: items.iter().map(|d| d.green).sum::<f64>() / n,
            red: items.iter().map(|d| d.red).sum::<f64>() / n,
        })
    }
}

/// Masking ratio per RGB channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskRatios {
    pub red: f64,
    pub green: f64,
    pub blue: f64,
}

impl MaskRatios {
    pub fn uniform(r: f64) -> Self {
        Self {
            red: r,
            green: r,
            blue: r,
        }
    }

    pub fn as_rgb(&self) -> [f64; 3] {
        [self.red, self.green, self.blue]
    }

    pub fn mean(&self) -> f64 {
        (self.red + self.green + self.blue) / 3.0
    }
}

/// Replaces every column in `region` by its mean over all rows.
pub fn perturb_region(m: &SpectralMatrix, region: &[usize]) -> Result<SpectralMatrix> {
    if let Some(&bad) = region.iter().find(|&&c| c >= m.cols()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: m.cols(),
        });
    }
    let means = m.column_means();
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for &c in region {
            row[c] = means[c];
        }
    }
    Ok(out)
}

pub fn spectral_density(cube: &SpectralCube, part: &BandPartition, eps: f64) -> Result<SpectralDensity> {
    if part.band_count() != cube.bands() || part.red.end > cube.bands() {
        return Err(Error::DimensionMismatch(format!(
            "partition covers {} bands, cube has {}",
            part.band_count(),
            cube.bands()
        )));
    }
    let s = cube_to_matrix(cube);
    let density = |range: std::ops::Range<usize>| -> Result<f64> {
        let region: Vec<usize> = range.collect();
        sam(&perturb_region(&s, &region)?, &s, eps)
    };
    Ok(SpectralDensity {
        blue: density(part.blue.clone())?,
        green: density(part.green.clone())?,
        red: density(part.red.clone())?,
    })
}

/// Min-max maps densities onto `[r_min, r_max]`. Equal densities give the midpoint.
pub fn masking_ratios(d: &SpectralDensity, r_min: f64, r_max: f64) -> Result<MaskRatios> {
    if !(0.0..=1.0).contains(&r_min) || !(0.0..=1.0).contains(&r_max) || r_min > r_max {
        return Err(Error::InvalidRange(format!(
            "need 0 <= r_min <= r_max <= 1, got r_min={r_min}, r_max={r_max}"
        )));
    }
    let values = d.as_rgb();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite density".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let map = |v: f64| {
        if hi > lo {
            (r_min + (v - lo) / (hi - lo) * (r_max - r_min)).clamp(r_min, r_max)
        } else {
            0.5 * (r_min + r_max)
        }
    };
    Ok(MaskRatios {
        red: map(d.red),
        green: map(d.green),
        blue: map(d.blue),
    })
}

/// Number of blocks to mask: `round(ratio * total)`, halves rounded up.
pub fn masked_block_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).round() as usize).min(total)
}

/// Channel-wise block masks. A `1` marks a masked (zeroed) entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub height: usize,
    pub width: usize,
    pub block_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Per channel (R, G, B), `grid_rows x grid_cols` block flags.
    pub blocks: [Vec<u8>; 3],
    /// Per channel, the block grid upsampled to `height x width`.
    pub pixels: [Vec<u8>; 3],
}

impl MaskPlan {
    pub fn empty(height: usize, width: usize, block_size: usize) -> Self {
        let grid_rows = height.div_ceil(block_size);
        let grid_cols = width.div_ceil(block_size);
        let blocks = std::array::from_fn(|_| vec![0; grid_rows * grid_cols]);
        let pixels = std::array::from_fn(|_| vec![0; height * width]);
        Self {
            height,
            width,
            block_size,
            grid_rows,
            grid_cols,
            blocks,
            pixels,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn masked_blocks(&self, ch: usize) -> usize {
        self.blocks[ch].iter().filter(|&&b| b == 1).count()
    }

    pub fn masked_pixels(&self, ch: usize) -> usize {
        self.pixels[ch].iter().filter(|&&b| b == 1).count()
    }

    /// Masked share of all channel entries.
    pub fn masked_fraction(&self) -> f64 {
        let masked: usize = (0..3).map(|ch| self.masked_pixels(ch)).sum();
        masked as f64 / (3 * self.height * self.width) as f64
    }

    fn upsample(&mut self) {
        let s = self.block_size;
        for ch in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    self.pixels[ch][y * self.width + x] = self.blocks[ch][(y / s) * self.grid_cols + x / s];
                }
            }
        }
    }
}

/// Draws exactly `round(r * n_blocks)` distinct blocks per channel, uniformly.
pub fn generate_mask(
    height: usize,
    width: usize,
    ratios: &MaskRatios,
    block_size: usize,
    seed: u64,
) -> Result<MaskPlan> {
    if block_size == 0 || block_size > height.min(width) {
        return Err(Error::InvalidBlockSize {
            block: block_size,
            height,
            width,
        });
    }
    if ratios.as_rgb().iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidRange(format!("mask ratios {ratios:?} outside [0, 1]")));
    }
    let mut plan = MaskPlan::empty(height, width, block_size);
    let total = plan.total_blocks();
    for (ch, ratio) in ratios.as_rgb().into_iter().enumerate() {
        let count = masked_block_count(ratio, total);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ch as u64]));
        for b in index::sample(&mut rng, total, count) {
            plan.blocks[ch][b] = 1;
        }
    }
    plan.upsample();
    Ok(plan)
}

/// Zeroes masked entries channel by channel.
pub fn apply_mask(img: &RgbImage, plan: &MaskPlan) -> Result<RgbImage> {
    if img.height() != plan.height || img.width() != plan.width {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            plan.height,
            plan.width
        )));
    }
    let mut out = img.clone();
    for ch in 0..3 {
        for (v, &m) in out.channel_mut(ch).iter_mut().zip(&plan.pixels[ch]) {
            if m == 1 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Dataset-level density: the mean density over the given cubes.
pub fn dataset_density(cubes: &[SpectralCube], part: &BandPartition, eps: f64) -> Result<SpectralDensity> {
    let densities = cubes
        .iter()
        .map(|c| spectral_density(c, part, eps))
        .collect::<Result<Vec<_>>>()?;
    SpectralDensity::mean(&densities)
}
