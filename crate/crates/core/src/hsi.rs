//! Spectral data model: wavelength grids, cubes, pixel-spectra matrices, RGB
//! images, band partitions and the simulated camera response.
//!
//! Cubes and images use a band-major planar layout: all of band 0 (row-major),
//! then all of band 1, and so on. Pixel `n` of a cube is `y * width + x`.

use std::ops::Range;

use crate::error::{Error, Result};

/// Band-center wavelengths in nanometres, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavelengths(Vec<f64>);

impl Wavelengths {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("wavelength grid"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::InvalidValue(format!(
                "wavelength {v} is not a finite positive value"
            )));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidValue("wavelengths must be strictly increasing".into()));
        }
        Ok(Self(values))
    }

    /// Uniform grid `start, start + step, ...` with `count` entries.
    pub fn uniform(start: f64, step: f64, count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| start + step * i as f64).collect())
    }

    /// 31 bands, 400..=700 nm in 10 nm steps.
    pub fn visible_31() -> Self {
        Self((0..31).map(|i| 400.0 + 10.0 * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Default for Wavelengths {
    fn default() -> Self {
        Self::visible_31()
    }
}

/// An `H x W x C` hyperspectral volume in band-major planar layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    wavelengths: Wavelengths,
    data: Vec<f64>,
}

impl SpectralCube {
    /// Builds a cube from planar data. Values must be finite; no clamping is applied.
    pub fn new(height: usize, width: usize, wavelengths: Wavelengths, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * wavelengths.len();
        if height == 0 || width == 0 {
            return Err(Error::EmptyInput("cube with zero spatial extent"));
        }
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "cube {height}x{width}x{} needs {expected} values, got {}",
                wavelengths.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("cube contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            wavelengths,
            data,
        })
    }

    /// Builds a cube and clamps every value into the reflectance range `[0, 1]`.
    pub fn from_reflectance(height: usize, width: usize, wavelengths: Wavelengths, mut data: Vec<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, wavelengths, data)
    }

    pub fn filled(height: usize, width: usize, wavelengths: Wavelengths, value: f64) -> Result<Self> {
        let n = height * width * wavelengths.len();
        Self::new(height, width, wavelengths, vec![value; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn wavelengths(&self) -> &Wavelengths {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[c * self.pixels() + y * self.width + x]
    }

    /// Spectrum of the pixel at `(y, x)`.
    pub fn spectrum(&self, y: usize, x: usize) -> Vec<f64> {
        let n = self.pixels();
        let p = y * self.width + x;
        (0..self.bands()).map(|c| self.data[c * n + p]).collect()
    }

    pub fn same_shape(&self, other: &SpectralCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands() == other.bands()
    }

    pub(crate) fn check_same_shape(&self, other: &SpectralCube) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.bands(),
                other.height,
                other.width,
                other.bands()
            )))
        }
    }

    /// Copies out the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidValue(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let data = crop_planes(&self.data, self.height, self.width, self.bands(), y0, x0, h, w);
        Ok(Self {
            height: h,
            width: w,
            wavelengths: self.wavelengths.clone(),
            data,
        })
    }
}

/// A three-channel image with planes ordered red, green, blue.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyInput("image with zero spatial extent"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::DimensionMismatch(format!(
                "rgb {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("image contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Like [`RgbImage::new`] but clamps values into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[ch * self.pixels() + y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidValue(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let data = crop_planes(&self.data, self.height, self.width, 3, y0, x0, h, w);
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn crop_planes(
    data: &[f64],
    height: usize,
    width: usize,
    planes: usize,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * h * w);
    for c in 0..planes {
        let plane = &data[c * height * width..(c + 1) * height * width];
        for y in y0..y0 + h {
            out.extend_from_slice(&plane[y * width + x0..y * width + x0 + w]);
        }
    }
    out
}

/// `N x C` matrix of pixel spectra, one row per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMatrix {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl SpectralMatrix {
    pub fn new(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c {
            return Err(Error::DimensionMismatch(format!(
                "matrix {n}x{c} needs {} values, got {}",
                n * c,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("matrix contains non-finite values".into()));
        }
        Ok(Self { n, c, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.c.max(1)).take(self.n)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &SpectralMatrix) -> bool {
        self.n == other.n && self.c == other.c
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.c];
        for row in self.iter_rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = self.n.max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

/// Which band indices make up the blue, green and red spectral regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandPartition {
    pub blue: Range<usize>,
    pub green: Range<usize>,
    pub red: Range<usize>,
}

impl BandPartition {
    /// Regions in red, green, blue order, matching the RGB plane order.
    pub fn regions(&self) -> [(&'static str, Range<usize>); 3] {
        [
            ("red", self.red.clone()),
            ("green", self.green.clone()),
            ("blue", self.blue.clone()),
        ]
    }

    pub fn band_count(&self) -> usize {
        self.blue.len() + self.green.len() + self.red.len()
    }
}

/// Upper edge (inclusive) of the blue region in nm.
pub const BLUE_UPPER_NM: f64 = 500.0;
/// Upper edge (inclusive) of the green region in nm; anything above is red.
pub const GREEN_UPPER_NM: f64 = 580.0;

/// Splits a grid into blue (λ ≤ 500), green (500 < λ ≤ 580) and red (λ > 580).
pub fn partition_from_wavelengths(w: &Wavelengths) -> Result<BandPartition> {
    let vals = w.as_slice();
    let blue_end = vals.iter().take_while(|&&v| v <= BLUE_UPPER_NM).count();
    let green_end = vals.iter().take_while(|&&v| v <= GREEN_UPPER_NM).count();
    let part = BandPartition {
        blue: 0..blue_end,
        green: blue_end..green_end,
        red: green_end..vals.len(),
    };
    for (name, r) in [("blue", &part.blue), ("green", &part.green), ("red", &part.red)] {
        if r.is_empty() {
            return Err(Error::PartitionEmpty(name));
        }
    }
    Ok(part)
}

/// A `3 x C` linear camera model, one row per output channel (R, G, B).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraResponse {
    bands: usize,
    matrix: Vec<f64>,
}

impl CameraResponse {
    /// Row-major `3 x bands`. Rows must be nonnegative and sum to one.
    pub fn new(bands: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != 3 * bands || bands == 0 {
            return Err(Error::DimensionMismatch(format!(
                "camera response needs 3x{bands} entries, got {}",
                matrix.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue(
                "camera response entries must be finite and nonnegative".into(),
            ));
        }
        for row in matrix.chunks_exact(bands) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidValue(format!(
                    "camera response row sums to {s}, expected 1"
                )));
            }
        }
        Ok(Self { bands, matrix })
    }

    /// Normalizes each row of a nonnegative `3 x bands` matrix to unit sum.
    pub fn normalized(bands: usize, mut matrix: Vec<f64>) -> Result<Self> {
        if bands == 0 || matrix.len() != 3 * bands {
            return Err(Error::DimensionMismatch("camera response must be 3xC".into()));
        }
        for row in matrix.chunks_exact_mut(bands) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::InvalidValue("camera response row has zero mass".into()));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::new(bands, matrix)
    }

    /// Gaussian channels centered at 600 / 550 / 450 nm with σ = 40 nm.
    pub fn gaussian(w: &Wavelengths) -> Result<Self> {
        const CENTERS: [f64; 3] = [600.0, 550.0, 450.0];
        const SIGMA: f64 = 40.0;
        let matrix = CENTERS
            .iter()
            .flat_map(|&mu| {
                w.as_slice()
                    .iter()
                    .map(move |&l| (-(l - mu).powi(2) / (2.0 * SIGMA * SIGMA)).exp())
            })
            .collect();
        Self::normalized(w.len(), matrix)
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn row(&self, ch: usize) -> &[f64] {
        &self.matrix[ch * self.bands..(ch + 1) * self.bands]
    }
}

pub fn cube_to_matrix(cube: &SpectralCube) -> SpectralMatrix {
    let n = cube.pixels();
    let c = cube.bands();
    let mut data = vec![0.0; n * c];
    for band in 0..c {
        for (p, v) in cube.band(band).iter().enumerate() {
            data[p * c + band] = *v;
        }
    }
    SpectralMatrix { n, c, data }
}

pub fn matrix_to_cube(
    m: &SpectralMatrix,
    height: usize,
    width: usize,
    wavelengths: Wavelengths,
) -> Result<SpectralCube> {
    if m.rows() != height * width || m.cols() != wavelengths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix cannot fill a {height}x{width}x{} cube",
            m.rows(),
            m.cols(),
            wavelengths.len()
        )));
    }
    let n = m.rows();
    let c = m.cols();
    let mut data = vec![0.0; n * c];
    for (p, row) in m.iter_rows().enumerate() {
        for (band, v) in row.iter().enumerate() {
            data[band * n + p] = *v;
        }
    }
    SpectralCube::new(height, width, wavelengths, data)
}

/// Renders an RGB image through the camera response, pixel by pixel.
pub fn rgb_from_cube(cube: &SpectralCube, resp: &CameraResponse) -> Result<RgbImage> {
    if resp.bands() != cube.bands() {
        return Err(Error::DimensionMismatch(format!(
            "camera response has {} bands, cube has {}",
            resp.bands(),
            cube.bands()
        )));
    }
    let n = cube.pixels();
    let mut data = vec![0.0; 3 * n];
    for ch in 0..3 {
        let out = &mut data[ch * n..(ch + 1) * n];
        for (band, &weight) in resp.row(ch).iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(cube.band(band)) {
                *o += weight * v;
            }
        }
    }
    // Rows sum to one, so rounding can only push reflectance values a hair past 1.
    RgbImage::from_clamped(cube.height(), cube.width(), data)
}

/// Scales each nonzero row to unit L2 norm. Zero rows stay zero.
pub fn l2_normalize_rows(m: &SpectralMatrix) -> SpectralMatrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        l2_normalize(out.row_mut(i));
    }
    out
}

/// In-place unit normalization; returns the original norm. Zero vectors are left alone.
pub fn l2_normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Per-band mean over all pixels.
pub fn global_average_pool(cube: &SpectralCube) -> Vec<f64> {
    let n = cube.pixels() as f64;
    (0..cube.bands())
        .map(|c| cube.band(c).iter().sum::<f64>() / n)
        .collect()
}
