//! Reconstruction quality metrics: spectral angle (SAM), global-statistics
//! SSIM, PSNR, mean absolute error and per-pixel error maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi::{SpectralCube, SpectralMatrix};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SAM_EPS: f64 = 1e-8;

/// Metrics averaged over an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    /// Radians. Multiply by 100 for the percent scale used in reports.
    pub sam: f64,
    /// dB; `f64::INFINITY` when the error is exactly zero.
    pub psnr: f64,
    pub l1: f64,
}

impl MetricReport {
    pub fn sam_percent(&self) -> f64 {
        100.0 * self.sam
    }
}

/// Angle between two spectra.
///
/// `eps` only guards degenerate (near zero norm) pairs, where the angle falls
/// back to `acos(dot / (|a||b| + eps))`. Otherwise the angle is evaluated as
/// `2 atan2(|â - b̂|, |â + b̂|)`, which equals `acos(<a,b> / (|a||b|))` but stays
/// accurate near 0 and π and is exactly invariant to positive rescaling.
pub fn spectral_angle(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb <= eps {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        return (dot / (na * nb + eps)).clamp(-1.0, 1.0).acos();
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Mean spectral angle over corresponding rows.
pub fn sam(a: &SpectralMatrix, b: &SpectralMatrix, eps: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::EmptyInput("spectral matrix"));
    }
    let total: f64 = a
        .iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| spectral_angle(x, y, eps))
        .sum();
    Ok(total / a.rows() as f64)
}

/// SAM computed directly on two cubes, without materializing pixel matrices.
pub fn sam_cube(a: &SpectralCube, b: &SpectralCube) -> Result<f64> {
    a.check_same_shape(b)?;
    let map = sam_map(a, b);
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

fn sam_map(a: &SpectralCube, b: &SpectralCube) -> Vec<f64> {
    let n = a.pixels();
    let bands = a.bands();
    let mut sa = vec![0.0; bands];
    let mut sb = vec![0.0; bands];
    (0..n)
        .map(|p| {
            for c in 0..bands {
                sa[c] = a.band(c)[p];
                sb[c] = b.band(c)[p];
            }
            spectral_angle(&sa, &sb, SAM_EPS)
        })
        .collect()
}

/// First and second moments of two equally sized planes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PlaneStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
}

pub(crate) fn plane_stats(x: &[f64], y: &[f64]) -> PlaneStats {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    PlaneStats {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    }
}

pub(crate) fn ssim_constants(dynamic_range: f64) -> (f64, f64) {
    ((SSIM_K1 * dynamic_range).powi(2), (SSIM_K2 * dynamic_range).powi(2))
}

/// Single-window SSIM using whole-plane means, variances and covariance.
pub fn ssim_global(x: &[f64], y: &[f64], dynamic_range: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} pixels", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("image plane"));
    }
    if dynamic_range <= 0.0 || !dynamic_range.is_finite() {
        return Err(Error::InvalidValue(format!("dynamic range {dynamic_range}")));
    }
    if x == y {
        return Ok(1.0);
    }
    let s = plane_stats(x, y);
    let (c1, c2) = ssim_constants(dynamic_range);
    let num = (2.0 * s.mean_x * s.mean_y + c1) * (2.0 * s.cov + c2);
    let den = (s.mean_x * s.mean_x + s.mean_y * s.mean_y + c1) * (s.var_x + s.var_y + c2);
    Ok(num / den)
}

/// Mean of per-band [`ssim_global`] with unit dynamic range.
pub fn ssim_cube(x: &SpectralCube, y: &SpectralCube) -> Result<f64> {
    x.check_same_shape(y)?;
    let mut total = 0.0;
    for c in 0..x.bands() {
        total += ssim_global(x.band(c), y.band(c), 1.0)?;
    }
    Ok(total / x.bands() as f64)
}

pub fn mse(x: &SpectralCube, y: &SpectralCube) -> Result<f64> {
    x.check_same_shape(y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.data().len() as f64)
}

/// `10 log10(peak^2 / MSE)`, or `+inf` when the cubes are identical.
pub fn psnr(x: &SpectralCube, y: &SpectralCube, peak: f64) -> Result<f64> {
    if peak <= 0.0 || !peak.is_finite() {
        return Err(Error::InvalidValue(format!("psnr peak {peak}")));
    }
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub fn l1(x: &SpectralCube, y: &SpectralCube) -> Result<f64> {
    x.check_same_shape(y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.data().len() as f64)
}

/// All four metrics for one prediction.
pub fn report(pred: &SpectralCube, gt: &SpectralCube) -> Result<MetricReport> {
    Ok(MetricReport {
        ssim: ssim_cube(pred, gt)?,
        sam: sam_cube(pred, gt)?,
        psnr: psnr(pred, gt, 1.0)?,
        l1: l1(pred, gt)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Per-pixel spectral angle in radians.
    Sam,
    /// Per-pixel mean absolute difference across bands.
    L1,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Sam => "sam",
            ErrorKind::L1 => "l1",
        }
    }
}

/// A single-channel float map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ErrorMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 8-bit binary PGM, min-max scaled. A flat map is written as all zeros.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes = pgm_bytes(self.width, self.height, &self.values);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Raw values as CSV, one image row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(values.len() + 32);
    write!(bytes, "P5\n{width} {height}\n255\n").expect("writing to a Vec cannot fail");
    bytes.extend(values.iter().map(|v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    bytes
}

pub fn error_map(pred: &SpectralCube, gt: &SpectralCube, kind: ErrorKind) -> Result<ErrorMap> {
    pred.check_same_shape(gt)?;
    let values = match kind {
        ErrorKind::Sam => sam_map(pred, gt),
        ErrorKind::L1 => {
            let mut acc = vec![0.0; pred.pixels()];
            for c in 0..pred.bands() {
                for (a, (p, g)) in acc.iter_mut().zip(pred.band(c).iter().zip(gt.band(c))) {
                    *a += (p - g).abs();
                }
            }
            let bands = pred.bands() as f64;
            acc.into_iter().map(|a| a / bands).collect()
        }
    };
    Ok(ErrorMap {
        height: pred.height(),
        width: pred.width(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{cube_to_matrix, Wavelengths};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(seed: u64, h: usize, w: usize, c: usize) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wl = Wavelengths::uniform(400.0, 10.0, c).unwrap();
        SpectralCube::new(h, w, wl, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sam_identical_and_orthogonal() {
        let a = SpectralMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(sam(&a, &a, SAM_EPS).unwrap() < 1e-6);
        let b = SpectralMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!((sam(&a, &b, SAM_EPS).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sam_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..50)
                .map(|_| (0..31).map(|_| rng.random::<f64>()).collect())
                .collect()
        };
        let (ra, rb) = (rows(&mut rng), rows(&mut rng));
        let a = SpectralMatrix::from_rows(&ra).unwrap();
        let b = SpectralMatrix::from_rows(&rb).unwrap();
        let mut oracle = 0.0;
        for (x, y) in ra.iter().zip(&rb) {
            let mut dot = 0.0;
            let mut nx = 0.0;
            let mut ny = 0.0;
            for i in 0..31 {
                dot += x[i] * y[i];
                nx += x[i] * x[i];
                ny += y[i] * y[i];
            }
            oracle += (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0).acos();
        }
        oracle /= 50.0;
        assert!((sam(&a, &b, 1e-8).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn sam_rejects_shape_mismatch() {
        let a = SpectralMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = SpectralMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(sam(&a, &b, SAM_EPS), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sam_cube_agrees_with_matrix_form() {
        let a = random_cube(2, 5, 6, 31);
        let b = random_cube(3, 5, 6, 31);
        let via_matrix = sam(&cube_to_matrix(&a), &cube_to_matrix(&b), SAM_EPS).unwrap();
        assert!((sam_cube(&a, &b).unwrap() - via_matrix).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        assert_eq!(ssim_global(&x, &x, 1.0).unwrap(), 1.0);

        let zeros = vec![0.0; 16];
        let ones = vec![1.0; 16];
        let c1 = (0.01f64).powi(2);
        let c2 = (0.03f64).powi(2);
        let expected = (c1 * c2) / ((1.0 + c1) * c2);
        let got = ssim_global(&zeros, &ones, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 9.999e-5).abs() < 1e-7);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            let a = ssim_global(&x, &y, 1.0).unwrap();
            let b = ssim_global(&y, &x, 1.0).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn ssim_cube_is_band_mean() {
        let x = random_cube(5, 4, 4, 2);
        let y = random_cube(6, 4, 4, 2);
        let s1 = ssim_global(x.band(0), y.band(0), 1.0).unwrap();
        let s2 = ssim_global(x.band(1), y.band(1), 1.0).unwrap();
        assert!((ssim_cube(&x, &y).unwrap() - (s1 + s2) / 2.0).abs() < 1e-15);
        assert_eq!(ssim_cube(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_band_order_is_irrelevant() {
        let x = random_cube(7, 4, 4, 3);
        let y = random_cube(8, 4, 4, 3);
        let permute = |c: &SpectralCube| {
            let mut data = Vec::new();
            for b in [2, 0, 1] {
                data.extend_from_slice(c.band(b));
            }
            SpectralCube::new(4, 4, c.wavelengths().clone(), data).unwrap()
        };
        let a = ssim_cube(&x, &y).unwrap();
        let b = ssim_cube(&permute(&x), &permute(&y)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn psnr_values() {
        let x = random_cube(9, 4, 4, 3);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);

        let wl = Wavelengths::uniform(400.0, 10.0, 3).unwrap();
        let a = SpectralCube::filled(4, 4, wl.clone(), 0.5).unwrap();
        let b = SpectralCube::filled(4, 4, wl, 0.6).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);

        let y = random_cube(10, 4, 4, 3);
        let m: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 48.0;
        assert!((psnr(&x, &y, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_drops_with_noise() {
        let x = random_cube(11, 8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pattern: Vec<f64> = x.data().iter().map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut last = f64::INFINITY;
        for amp in [0.001, 0.01, 0.05, 0.1, 0.3] {
            let noisy: Vec<f64> = x.data().iter().zip(&pattern).map(|(v, p)| v + amp * p).collect();
            let y = SpectralCube::new(8, 8, x.wavelengths().clone(), noisy).unwrap();
            let p = psnr(&x, &y, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn l1_values() {
        let x = random_cube(13, 4, 5, 6);
        assert_eq!(l1(&x, &x).unwrap(), 0.0);
        let shifted: Vec<f64> = x.data().iter().map(|v| v + 0.25).collect();
        let y = SpectralCube::new(4, 5, x.wavelengths().clone(), shifted).unwrap();
        assert!((l1(&x, &y).unwrap() - 0.25).abs() < 1e-12);
        let z = random_cube(14, 4, 5, 6);
        let oracle: f64 = x.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 120.0;
        assert!((l1(&x, &z).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn error_maps() {
        let gt = random_cube(15, 6, 7, 5);
        for kind in [ErrorKind::Sam, ErrorKind::L1] {
            let m = error_map(&gt, &gt, kind).unwrap();
            assert!(m.values.iter().all(|v| *v < 1e-6));
        }
        let mut data = gt.data().to_vec();
        let n = gt.pixels();
        let p = 2 * 7 + 3;
        data[p] = 1.0 - data[p];
        data[3 * n + p] = 0.0;
        let pred = SpectralCube::new(6, 7, gt.wavelengths().clone(), data).unwrap();
        let m = error_map(&pred, &gt, ErrorKind::L1).unwrap();
        for (i, v) in m.values.iter().enumerate() {
            assert_eq!(*v > 0.0, i == p);
        }
        let other = random_cube(16, 6, 7, 5);
        let m = error_map(&other, &gt, ErrorKind::L1).unwrap();
        assert!((m.mean() - l1(&other, &gt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = pgm_bytes(2, 1, &[0.5, 1.5]);
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
        let flat = pgm_bytes(2, 1, &[0.3, 0.3]);
        assert_eq!(&flat[flat.len() - 2..], &[0, 0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, 8), 1..12)
        }

        proptest! {
            #[test]
            fn sam_symmetric_and_bounded(a in rows(), seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|_| rng.random::<f64>() - 0.3).collect()).collect();
                let ma = SpectralMatrix::from_rows(&a).unwrap();
                let mb = SpectralMatrix::from_rows(&b).unwrap();
                let ab = sam(&ma, &mb, SAM_EPS).unwrap();
                let ba = sam(&mb, &ma, SAM_EPS).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12);
                prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
            }

            #[test]
            fn sam_scale_invariant(a in rows(), alpha in 0.1f64..10.0) {
                let unit = crate::hsi::l2_normalize_rows(&SpectralMatrix::from_rows(&a).unwrap());
                let scaled: Vec<f64> = unit.data().iter().map(|v| v * alpha).collect();
                let scaled = SpectralMatrix::new(unit.rows(), unit.cols(), scaled).unwrap();
                let base = sam(&unit, &unit, SAM_EPS).unwrap();
                prop_assert!(base <= 1e-3);
                prop_assert!((sam(&scaled, &unit, SAM_EPS).unwrap() - base).abs() <= 1e-9);
            }
        }
    }
}
