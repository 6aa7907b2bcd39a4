//! Spectral endmember representation alignment.
//!
//! An endmember bank is seeded by ATGP over unit-normalized labeled pixel
//! spectra. Predictions are summarized by their pooled, unit-normalized mean
//! spectrum; the alignment loss rewards cosine similarity to the closest
//! endmember, and the bank follows the features through momentum updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi::{global_average_pool, l2_normalize, SpectralCube, SpectralMatrix};

/// Residual norms closer than this are treated as ties.
pub const ATGP_TIE_TOLERANCE: f64 = 1e-9;
/// Largest residual below this means the remaining rows lie in the selected span.
pub const ATGP_COLLAPSE: f64 = 1e-10;

pub const DEFAULT_ENDMEMBERS: usize = 16;
pub const DEFAULT_SAMPLE_SIZE: usize = 4096;
pub const DEFAULT_BANK_MOMENTUM: f64 = 0.9;

/// Draws `n` pixel spectra uniformly (with replacement) from the pooled pixels
/// of all cubes, then scales each to unit L2 norm.
pub fn sample_pixels(cubes: &[SpectralCube], n: usize, seed: u64) -> Result<SpectralMatrix> {
    let first = cubes.first().ok_or(Error::EmptyInput("cube list"))?;
    if n == 0 {
        return Err(Error::EmptyInput("pixel sample size"));
    }
    let bands = first.bands();
    if let Some(c) = cubes.iter().find(|c| c.bands() != bands) {
        return Err(Error::DimensionMismatch(format!(
            "cubes mix {bands} and {} bands",
            c.bands()
        )));
    }
    let offsets: Vec<usize> = cubes
        .iter()
        .scan(0, |acc, c| {
            let start = *acc;
            *acc += c.pixels();
            Some(start)
        })
        .collect();
    let population: usize = cubes.iter().map(SpectralCube::pixels).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * bands);
    for _ in 0..n {
        let g = rng.random_range(0..population);
        let ci = offsets.partition_point(|&o| o <= g) - 1;
        let cube = &cubes[ci];
        let p = g - offsets[ci];
        let start = data.len();
        data.extend((0..bands).map(|b| cube.band(b)[p]));
        l2_normalize(&mut data[start..]);
    }
    SpectralMatrix::new(n, bands, data)
}

/// Rows picked by ATGP, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct AtgpSelection {
    pub indices: Vec<usize>,
    pub endmembers: SpectralMatrix,
}

/// Automated target generation: the first pick is the largest-norm row, each
/// later pick has the largest residual after projecting out the span of the
/// previous picks. Residuals are maintained with modified Gram-Schmidt.
pub fn atgp(s: &SpectralMatrix, k: usize) -> Result<AtgpSelection> {
    if k == 0 {
        return Err(Error::InvalidValue("ATGP needs k >= 1".into()));
    }
    if s.rows() < k {
        return Err(Error::InsufficientRows {
            needed: k,
            got: s.rows(),
        });
    }
    let c = s.cols();
    let mut residual = s.data().to_vec();
    let mut indices = Vec::with_capacity(k);
    for step in 0..k {
        let norms: Vec<f64> = residual
            .chunks_exact(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let pick = argmax_lowest(&norms, ATGP_TIE_TOLERANCE);
        if norms[pick] < ATGP_COLLAPSE {
            return Err(Error::RankDeficient {
                selected: step,
                requested: k,
            });
        }
        indices.push(pick);
        let q: Vec<f64> = residual[pick * c..(pick + 1) * c]
            .iter()
            .map(|v| v / norms[pick])
            .collect();
        for r in residual.chunks_exact_mut(c) {
            let dot: f64 = r.iter().zip(&q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(&q).for_each(|(a, b)| *a -= dot * b);
        }
    }
    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| s.row(i).to_vec()).collect();
    Ok(AtgpSelection {
        endmembers: SpectralMatrix::from_rows(&rows)?,
        indices,
    })
}

/// Index of the maximum; values within `tol` of the maximum count as ties and
/// the lowest index wins.
pub fn argmax_lowest(values: &[f64], tol: f64) -> usize {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v >= max - tol).unwrap_or(0)
}

/// Unit-norm spectral anchors with the momentum used to update them.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberBank {
    endmembers: SpectralMatrix,
    momentum: f64,
}

impl EndmemberBank {
    /// Normalizes the given rows. Rows must be nonzero.
    pub fn new(endmembers: SpectralMatrix, momentum: f64) -> Result<Self> {
        if endmembers.rows() == 0 {
            return Err(Error::EmptyInput("endmember bank"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidRange(format!("bank momentum {momentum}")));
        }
        let mut endmembers = endmembers;
        for i in 0..endmembers.rows() {
            if l2_normalize(endmembers.row_mut(i)) == 0.0 {
                return Err(Error::InvalidValue(format!("endmember {i} is the zero vector")));
            }
        }
        Ok(Self { endmembers, momentum })
    }

    pub fn k(&self) -> usize {
        self.endmembers.rows()
    }

    pub fn bands(&self) -> usize {
        self.endmembers.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn endmembers(&self) -> &SpectralMatrix {
        &self.endmembers
    }

    pub fn endmember(&self, k: usize) -> &[f64] {
        self.endmembers.row(k)
    }

    /// Closest endmember (largest inner product) for each feature.
    pub fn assign(&self, features: &[Vec<f64>]) -> Result<Assignment> {
        let mut index = Vec::with_capacity(features.len());
        let mut similarity = Vec::with_capacity(features.len());
        for z in features {
            if z.len() != self.bands() {
                return Err(Error::DimensionMismatch(format!(
                    "feature has {} bands, bank has {}",
                    z.len(),
                    self.bands()
                )));
            }
            let sims: Vec<f64> = self
                .endmembers
                .iter_rows()
                .map(|e| e.iter().zip(z).map(|(a, b)| a * b).sum())
                .collect();
            let best = argmax_lowest(&sims, 0.0);
            index.push(best);
            similarity.push(sims[best]);
        }
        Ok(Assignment { index, similarity })
    }

    /// Moves each endmember toward the mean of its assigned features:
    /// `e <- Norm(m e + (1 - m) mean)`. Endmembers with no assignments stay put.
    pub fn momentum_update(&mut self, features: &[Vec<f64>], assignment: &Assignment) -> Result<()> {
        if assignment.index.len() != features.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} assignments for {} features",
                assignment.index.len(),
                features.len()
            )));
        }
        let c = self.bands();
        let mut sums = vec![0.0; self.k() * c];
        let mut counts = vec![0usize; self.k()];
        for (z, &a) in features.iter().zip(&assignment.index) {
            if a >= self.k() || z.len() != c {
                return Err(Error::DimensionMismatch(format!(
                    "assignment {a} / feature length {} incompatible with bank {}x{c}",
                    z.len(),
                    self.k()
                )));
            }
            counts[a] += 1;
            sums[a * c..(a + 1) * c].iter_mut().zip(z).for_each(|(s, v)| *s += v);
        }
        let m = self.momentum;
        for k in 0..self.k() {
            if counts[k] == 0 {
                continue;
            }
            let n = counts[k] as f64;
            let mut updated: Vec<f64> = self
                .endmembers
                .row(k)
                .iter()
                .zip(&sums[k * c..(k + 1) * c])
                .map(|(e, s)| m * e + (1.0 - m) * s / n)
                .collect();
            // Antipodal mean and m = 0.5 can cancel exactly; keep the old anchor then.
            if l2_normalize(&mut updated) > 0.0 {
                self.endmembers.row_mut(k).copy_from_slice(&updated);
            }
        }
        Ok(())
    }
}

/// Bank from ATGP over `n_sample` unit-normalized pixels of the labeled cubes.
pub fn init_bank(
    labeled_cubes: &[SpectralCube],
    k: usize,
    n_sample: usize,
    momentum: f64,
    seed: u64,
) -> Result<EndmemberBank> {
    let sample = sample_pixels(labeled_cubes, n_sample, seed)?;
    let picked = atgp(&sample, k)?;
    EndmemberBank::new(picked.endmembers, momentum)
}

/// Per-feature closest endmember and its cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub index: Vec<usize>,
    pub similarity: Vec<f64>,
}

/// Pooled mean spectrum of a prediction, unit-normalized.
pub fn spectral_feature(pred: &SpectralCube) -> Vec<f64> {
    let mut z = global_average_pool(pred);
    l2_normalize(&mut z);
    z
}

/// Pulls a gradient on the unit feature back onto the prediction cube,
/// through the normalization and the spatial average. Returns a planar
/// gradient with the cube's layout.
pub fn feature_backward(pred: &SpectralCube, feature_grad: &[f64]) -> Vec<f64> {
    let pooled = global_average_pool(pred);
    let pooled_grad = normalize_backward(&pooled, feature_grad);
    let n = pred.pixels();
    let scale = 1.0 / n as f64;
    let mut out = vec![0.0; pred.data().len()];
    for (c, g) in pooled_grad.iter().enumerate() {
        out[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = g * scale);
    }
    out
}

/// Gradient of `g . (p / |p|)` with respect to `p`: `(g - z (z . g)) / |p|`.
pub fn normalize_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; p.len()];
    }
    let z: Vec<f64> = p.iter().map(|v| v / norm).collect();
    let zg: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
    z.iter().zip(g).map(|(zi, gi)| (gi - zi * zg) / norm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeraLoss {
    pub loss: f64,
    /// d loss / d z_i for each feature.
    pub grads: Vec<Vec<f64>>,
    pub assignment: Assignment,
}

/// `mean_i (1 - max_k z_i . e_k)`. The assigned endmember is held fixed, so the
/// gradient for feature `i` is `-e_{a_i} / |batch|`.
pub fn sera_loss(features: &[Vec<f64>], bank: &EndmemberBank) -> Result<SeraLoss> {
    if features.is_empty() {
        return Err(Error::EmptyInput("feature batch"));
    }
    let assignment = bank.assign(features)?;
    let b = features.len() as f64;
    let loss = assignment.similarity.iter().map(|s| 1.0 - s).sum::<f64>() / b;
    let grads = assignment
        .index
        .iter()
        .map(|&k| bank.endmember(k).iter().map(|e| -e / b).collect())
        .collect();
    Ok(SeraLoss {
        loss,
        grads,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::Wavelengths;

    fn matrix(rows: &[&[f64]]) -> SpectralMatrix {
        SpectralMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_cube(seed: u64, h: usize, w: usize, c: usize) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wl = Wavelengths::uniform(400.0, 10.0, c).unwrap();
        SpectralCube::new(h, w, wl, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sampling_single_pixel() {
        let wl = Wavelengths::uniform(400.0, 10.0, 3).unwrap();
        let cube = SpectralCube::new(1, 1, wl, vec![0.3, 0.4, 1.2]).unwrap();
        let s = sample_pixels(&[cube], 5, 0).unwrap();
        assert_eq!(s.rows(), 5);
        let norm = 1.3f64;
        for row in s.iter_rows() {
            assert_eq!(row, s.row(0));
            assert!((row[2] - 1.2 / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_rows_are_unit_and_reproducible() {
        let cubes = [random_cube(1, 4, 4, 31), random_cube(2, 3, 5, 31)];
        let a = sample_pixels(&cubes, 200, 42).unwrap();
        for row in a.iter_rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let b = sample_pixels(&cubes, 200, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(sample_pixels(&[], 3, 0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn atgp_small_example() {
        let s = matrix(&[&[3.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]]);
        let sel = atgp(&s, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        assert_eq!(sel.endmembers.row(1), &[0.0, 2.0]);
        assert_eq!(atgp(&s, 1).unwrap().indices, vec![0]);
    }

    #[test]
    fn atgp_errors() {
        let s = matrix(&[&[1.0, 0.0]]);
        assert!(matches!(
            atgp(&s, 2),
            Err(Error::InsufficientRows { needed: 2, got: 1 })
        ));
        let s = matrix(&[&[1.0, 1.0], &[2.0, 2.0], &[-1.0, -1.0]]);
        assert!(matches!(
            atgp(&s, 2),
            Err(Error::RankDeficient {
                selected: 1,
                requested: 2
            })
        ));
    }

    #[test]
    fn atgp_ties_pick_lowest_index() {
        let s = matrix(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, -1.0]]);
        assert_eq!(atgp(&s, 2).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn constant_spectrum_bank() {
        let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
        let spectrum = [0.1, 0.2, 0.3, 0.4];
        let data: Vec<f64> = spectrum.iter().flat_map(|&v| std::iter::repeat_n(v, 9)).collect();
        let cube = SpectralCube::new(3, 3, wl, data).unwrap();
        let bank = init_bank(&[cube], 1, 16, 0.9, 3).unwrap();
        let norm = 0.3f64.sqrt();
        for (e, s) in bank.endmember(0).iter().zip(spectrum) {
            assert!((e - s / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_is_unit_and_deterministic() {
        let cubes = [random_cube(5, 8, 8, 31)];
        let a = init_bank(&cubes, 6, 256, 0.9, 11).unwrap();
        let b = init_bank(&cubes, 6, 256, 0.9, 11).unwrap();
        assert_eq!(a, b);
        for row in a.endmembers().iter_rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_of_constant_cube() {
        let cube = SpectralCube::filled(4, 4, Wavelengths::visible_31(), 0.5).unwrap();
        let z = spectral_feature(&cube);
        for v in z {
            assert!((v - 1.0 / 31f64.sqrt()).abs() < 1e-12);
        }
        let zero = SpectralCube::filled(2, 2, Wavelengths::visible_31(), 0.0).unwrap();
        assert!(spectral_feature(&zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_matches_composition() {
        let cube = random_cube(7, 5, 6, 31);
        let z = spectral_feature(&cube);
        let mut oracle = global_average_pool(&cube);
        let n = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        oracle.iter_mut().for_each(|v| *v /= n);
        for (a, b) in z.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((z.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_extremes() {
        let bank = EndmemberBank::new(matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]), 0.9).unwrap();
        let exact = sera_loss(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &bank).unwrap();
        assert!(exact.loss.abs() < 1e-9);
        assert_eq!(exact.assignment.index, vec![0, 1]);
        let orth = sera_loss(&[vec![0.0, 0.0, 1.0]], &bank).unwrap();
        assert!((orth.loss - 1.0).abs() < 1e-12);
        assert!(matches!(
            sera_loss(&[vec![1.0, 0.0]], &bank),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn loss_gradient_through_pooling_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bank_rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
        let bank = EndmemberBank::new(SpectralMatrix::from_rows(&bank_rows).unwrap(), 0.9).unwrap();
        let pooled: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.random::<f64>() + 0.1).collect())
            .collect();
        let loss_of = |ps: &[Vec<f64>]| -> f64 {
            let feats: Vec<Vec<f64>> = ps
                .iter()
                .map(|p| {
                    let mut z = p.clone();
                    l2_normalize(&mut z);
                    z
                })
                .collect();
            sera_loss(&feats, &bank).unwrap().loss
        };
        let feats: Vec<Vec<f64>> = pooled
            .iter()
            .map(|p| {
                let mut z = p.clone();
                l2_normalize(&mut z);
                z
            })
            .collect();
        let out = sera_loss(&feats, &bank).unwrap();
        let h = 1e-5;
        for i in 0..pooled.len() {
            let analytic = normalize_backward(&pooled[i], &out.grads[i]);
            for c in 0..8 {
                let mut plus = pooled.clone();
                plus[i][c] += h;
                let mut minus = pooled.clone();
                minus[i][c] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let rel = (fd - analytic[c]).abs() / fd.abs().max(analytic[c].abs()).max(1e-8);
                assert!(rel < 1e-4, "feature {i} band {c}: fd {fd} analytic {}", analytic[c]);
            }
        }
    }

    #[test]
    fn momentum_limits() {
        let bank0 = EndmemberBank::new(matrix(&[&[1.0, 0.0]]), 1.0).unwrap();
        let mut bank = bank0.clone();
        let feats = vec![vec![0.6, 0.8]];
        let a = bank.assign(&feats).unwrap();
        bank.momentum_update(&feats, &a).unwrap();
        assert_eq!(bank, bank0);

        let mut bank = EndmemberBank::new(matrix(&[&[1.0, 0.0]]), 0.0).unwrap();
        bank.momentum_update(&feats, &a).unwrap();
        assert!((bank.endmember(0)[0] - 0.6).abs() < 1e-12 && (bank.endmember(0)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn momentum_point_nine() {
        let mut bank = EndmemberBank::new(matrix(&[&[1.0, 0.0]]), 0.9).unwrap();
        let feats = vec![vec![0.0, 1.0]];
        let a = Assignment {
            index: vec![0],
            similarity: vec![0.0],
        };
        bank.momentum_update(&feats, &a).unwrap();
        let n = (0.81f64 + 0.01).sqrt();
        let e = bank.endmember(0);
        assert!((e[0] - 0.9 / n).abs() < 1e-12 && (e[1] - 0.1 / n).abs() < 1e-12);
        assert!((e[0] - 0.9939).abs() < 1e-4 && (e[1] - 0.1104).abs() < 1e-4);
    }

    #[test]
    fn unassigned_endmembers_do_not_move() {
        let mut bank = EndmemberBank::new(matrix(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.5).unwrap();
        let feats = vec![vec![0.8, 0.6]];
        let a = bank.assign(&feats).unwrap();
        bank.momentum_update(&feats, &a).unwrap();
        assert_eq!(bank.endmember(1), &[0.0, 1.0]);
        assert_ne!(bank.endmember(0), &[1.0, 0.0]);
    }
}
