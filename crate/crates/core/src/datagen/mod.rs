//! Synthetic two-domain hyperspectral data under covariate shift.
//!
//! Both domains mix the same endmember spectra with the same linear law, so
//! the spectrum given its RGB rendering behaves alike in each. They differ in
//! how abundances are distributed, in illumination, in spatial smoothness, and
//! in the target's stronger spatial variation across the red bands.

pub mod hsc;
pub mod manifest;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::hsi::{partition_from_wavelengths, SpectralCube, SpectralMatrix, Wavelengths};
use crate::seed::derive_seed;

pub use hsc::{read_cube, read_rgb, write_cube, write_rgb};
pub use manifest::{build_manifest, build_manifest_sized, Counts, Dataset, DatasetManifest, ManifestEntry, Role};

/// Generative description of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub wavelengths: Wavelengths,
    /// `K0 x C` endmember spectra with entries in `[0, 1]`.
    pub endmembers: SpectralMatrix,
    /// Dirichlet concentration per endmember; zero removes that endmember.
    pub concentration: Vec<f64>,
    /// Per-band multiplicative illumination, positive.
    pub illumination: Vec<f64>,
    pub noise_sigma: f64,
    /// Box-blur radius applied to abundance maps.
    pub smoothness: usize,
    /// Per-band gain on the deviation from the band's spatial mean.
    pub band_contrast: Vec<f64>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (k, c) = (self.endmembers.rows(), self.endmembers.cols());
        if k < 2 {
            return Err(Error::InvalidValue(format!("need at least 2 endmembers, got {k}")));
        }
        if c != self.wavelengths.len() || self.illumination.len() != c || self.band_contrast.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "endmembers have {c} bands, wavelengths {}, illumination {}, contrast {}",
                self.wavelengths.len(),
                self.illumination.len(),
                self.band_contrast.len()
            )));
        }
        if self.concentration.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{k} endmembers but {} concentrations",
                self.concentration.len()
            )));
        }
        if self.endmembers.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("endmember entries must lie in [0, 1]".into()));
        }
        if self.concentration.iter().any(|v| !v.is_finite() || *v < 0.0) || self.concentration.iter().all(|v| *v == 0.0)
        {
            return Err(Error::InvalidValue(
                "concentrations must be nonnegative with one positive".into(),
            ));
        }
        if self.illumination.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidValue("illumination must be positive".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidValue(format!("noise sigma {}", self.noise_sigma)));
        }
        if self.band_contrast.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue("band contrast must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Separable box blur with edge replication, applied to one `h x w` plane.
fn box_blur(plane: &mut [f64], h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| plane[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize])
                .sum();
            tmp[y * w + x] = s / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
            plane[y * w + x] = s / norm;
        }
    }
}

/// Per-pixel Dirichlet abundances, planar `K0 x (h*w)`.
fn draw_abundances(concentration: &[f64], pixels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = concentration.len();
    let gammas: Vec<Option<Gamma<f64>>> = concentration
        .iter()
        .map(|&a| (a > 0.0).then(|| Gamma::new(a, 1.0).expect("positive shape")))
        .collect();
    let active = gammas.iter().filter(|g| g.is_some()).count() as f64;
    let mut out = vec![0.0; k * pixels];
    let mut draws = vec![0.0; k];
    for p in 0..pixels {
        for (d, g) in draws.iter_mut().zip(&gammas) {
            *d = g.as_ref().map_or(0.0, |g| g.sample(rng));
        }
        let total: f64 = draws.iter().sum();
        for (i, (d, g)) in draws.iter().zip(&gammas).enumerate() {
            out[i * pixels + p] = if total > 0.0 {
                d / total
            } else if g.is_some() {
                1.0 / active
            } else {
                0.0
            };
        }
    }
    out
}

/// Draws one cube. Values are clamped to `[0, 1]` and rounded to f32 precision
/// so the cube survives an HSC1 round trip unchanged.
pub fn synth_cube(spec: &DomainSpec, h: usize, w: usize, seed: u64) -> Result<SpectralCube> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("cube with zero spatial extent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let k = spec.endmembers.rows();
    let c = spec.endmembers.cols();
    let mut abundance = draw_abundances(&spec.concentration, n, &mut rng);
    for plane in abundance.chunks_exact_mut(n) {
        box_blur(plane, h, w, spec.smoothness);
    }
    let mut data = vec![0.0; c * n];
    for band in 0..c {
        let out = &mut data[band * n..(band + 1) * n];
        for e in 0..k {
            let weight = spec.endmembers.row(e)[band];
            let a = &abundance[e * n..(e + 1) * n];
            out.iter_mut().zip(a).for_each(|(o, a)| *o += weight * a);
        }
        let gain = spec.band_contrast[band];
        if gain != 1.0 {
            let mean = out.iter().sum::<f64>() / n as f64;
            out.iter_mut().for_each(|v| *v = mean + gain * (*v - mean));
        }
        let illum = spec.illumination[band];
        out.iter_mut().for_each(|v| *v *= illum);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0) as f32 as f64);
    SpectralCube::new(h, w, spec.wavelengths.clone(), data)
}

/// Number of shared endmembers in generated domains.
pub const DOMAIN_ENDMEMBERS: usize = 5;

/// Smooth reflectance-like curve: a low baseline plus one or two Gaussian bumps.
fn bump_spectrum(wl: &Wavelengths, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.random_range(0.05..0.2);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=2))
        .map(|_| {
            (
                rng.random_range(420.0..680.0),
                rng.random_range(25.0..70.0),
                rng.random_range(0.3..0.75),
            )
        })
        .collect();
    wl.as_slice()
        .iter()
        .map(|&l| {
            let v = base
                + bumps
                    .iter()
                    .map(|(mu, s, a)| a * (-(l - mu).powi(2) / (2.0 * s * s)).exp())
                    .sum::<f64>();
            v.min(0.95)
        })
        .collect()
}

/// Source and target domains sharing endmembers and mixing law.
pub fn make_domains(seed: u64) -> (DomainSpec, DomainSpec) {
    let wl = Wavelengths::visible_31();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD0]));
    let rows: Vec<Vec<f64>> = (0..DOMAIN_ENDMEMBERS).map(|_| bump_spectrum(&wl, &mut rng)).collect();
    let endmembers = SpectralMatrix::from_rows(&rows).expect("equal-length rows");
    let c = wl.len();

    let source = DomainSpec {
        wavelengths: wl.clone(),
        endmembers: endmembers.clone(),
        concentration: vec![1.0; DOMAIN_ENDMEMBERS],
        illumination: vec![0.95; c],
        noise_sigma: 0.005,
        smoothness: 2,
        band_contrast: vec![1.0; c],
    };

    // Target: skewed abundances, a warm illumination ramp, finer texture and
    // doubled spatial deviation (four times the variance) in the red bands.
    let concentration = (0..DOMAIN_ENDMEMBERS).map(|_| rng.random_range(0.2..2.0)).collect();
    let illumination = wl.as_slice().iter().map(|l| 0.4 + 0.6 * (l - 400.0) / 300.0).collect();
    let part = partition_from_wavelengths(&wl).expect("visible grid covers all regions");
    let band_contrast = (0..c).map(|b| if part.red.contains(&b) { 2.0 } else { 1.0 }).collect();
    let target = DomainSpec {
        wavelengths: wl,
        endmembers,
        concentration,
        illumination,
        noise_sigma: 0.005,
        smoothness: 1,
        band_contrast,
    };
    (source, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{cube_to_matrix, global_average_pool};
    use crate::metrics::{spectral_angle, SAM_EPS};
    use crate::sdm::spectral_density;

    fn tiny_spec(k: usize) -> DomainSpec {
        let wl = Wavelengths::uniform(400.0, 50.0, 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..4).map(|b| ((i * 4 + b) % 7) as f64 / 8.0 + 0.05).collect())
            .collect();
        DomainSpec {
            wavelengths: wl,
            endmembers: SpectralMatrix::from_rows(&rows).unwrap(),
            concentration: vec![1.0; k],
            illumination: vec![1.0; 4],
            noise_sigma: 0.0,
            smoothness: 1,
            band_contrast: vec![1.0; 4],
        }
    }

    #[test]
    fn single_active_endmember_gives_flat_cube() {
        let mut spec = tiny_spec(3);
        spec.concentration = vec![0.0, 2.0, 0.0];
        spec.illumination = vec![0.5, 1.0, 0.8, 0.9];
        let cube = synth_cube(&spec, 5, 6, 1).unwrap();
        let e = spec.endmembers.row(1);
        for y in 0..5 {
            for x in 0..6 {
                for (c, (ec, ic)) in e.iter().zip(&spec.illumination).enumerate() {
                    let want = (ec * ic).clamp(0.0, 1.0) as f32 as f64;
                    assert!((cube.get(y, x, c) - want).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (s, t) = make_domains(3);
        assert_eq!(synth_cube(&t, 16, 16, 9).unwrap(), synth_cube(&t, 16, 16, 9).unwrap());
        assert_ne!(synth_cube(&s, 16, 16, 9).unwrap(), synth_cube(&s, 16, 16, 10).unwrap());
    }

    /// Distance from `p` to the convex hull of `rows`, by projected gradient
    /// descent over simplex weights.
    fn hull_residual(p: &[f64], rows: &[&[f64]]) -> f64 {
        let k = rows.len();
        let mut wts = vec![1.0 / k as f64; k];
        let step = 1.0 / rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        let residual = |wts: &[f64]| -> Vec<f64> {
            (0..p.len())
                .map(|c| rows.iter().zip(wts).map(|(r, w)| r[c] * w).sum::<f64>() - p[c])
                .collect()
        };
        for _ in 0..20000 {
            let r = residual(&wts);
            let grad: Vec<f64> = rows
                .iter()
                .map(|row| row.iter().zip(&r).map(|(a, b)| a * b).sum())
                .collect();
            let mut next: Vec<f64> = wts.iter().zip(&grad).map(|(w, g)| w - step * g).collect();
            project_simplex(&mut next);
            wts = next;
        }
        residual(&wts).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn project_simplex(v: &mut [f64]) {
        let mut u = v.to_vec();
        u.sort_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (i, ui) in u.iter().enumerate() {
            cum += ui;
            let t = (cum - 1.0) / (i + 1) as f64;
            if ui - t > 0.0 {
                theta = t;
            }
        }
        v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
    }

    #[test]
    fn noiseless_pixels_lie_in_endmember_hull() {
        let spec = tiny_spec(3);
        let cube = synth_cube(&spec, 4, 4, 5).unwrap();
        let rows: Vec<&[f64]> = spec.endmembers.iter_rows().collect();
        let m = cube_to_matrix(&cube);
        for p in m.iter_rows() {
            // f32 rounding of the stored values bounds the achievable residual.
            assert!(hull_residual(p, &rows) < 1e-6);
        }
    }

    #[test]
    fn domains_share_endmembers_but_differ() {
        for seed in 0..10 {
            let (s, t) = make_domains(seed);
            assert_eq!(s.endmembers, t.endmembers);
            assert_ne!(s.illumination, t.illumination);
            let cs = synth_cube(&s, 32, 32, derive_seed(seed, &[1])).unwrap();
            let ct = synth_cube(&t, 32, 32, derive_seed(seed, &[2])).unwrap();
            let angle = spectral_angle(&global_average_pool(&cs), &global_average_pool(&ct), SAM_EPS);
            assert!(angle > 0.05, "seed {seed}: mean-spectrum angle {angle}");
        }
    }

    #[test]
    fn target_red_density_dominates() {
        for seed in 0..10 {
            let (_, t) = make_domains(seed);
            let cube = synth_cube(&t, 32, 32, derive_seed(seed, &[3])).unwrap();
            let part = partition_from_wavelengths(cube.wavelengths()).unwrap();
            let d = spectral_density(&cube, &part, SAM_EPS).unwrap();
            assert!(d.red > d.green && d.red > d.blue, "seed {seed}: {d:?}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = tiny_spec(3);
        spec.concentration = vec![0.0; 3];
        assert!(synth_cube(&spec, 2, 2, 0).is_err());
        let mut spec = tiny_spec(3);
        spec.illumination[0] = 0.0;
        assert!(synth_cube(&spec, 2, 2, 0).is_err());
        assert!(tiny_spec(1).validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn generated_cubes_are_valid_reflectance(seed: u64, h in 1usize..12, w in 1usize..12) {
                let (s, t) = make_domains(seed);
                for spec in [&s, &t] {
                    let cube = synth_cube(spec, h, w, seed).unwrap();
                    prop_assert!(cube.data().iter().all(|v| (0.0..=1.0).contains(v) && *v == *v as f32 as f64));
                }
            }
        }
    }
}
