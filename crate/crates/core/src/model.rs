//! RGB to hyperspectral reconstruction network and its loss functions.
//!
//! The network is a per-pixel multilayer perceptron over a `(2p+1) x (2p+1)`
//! RGB neighborhood: tanh hidden layers and a logistic output layer with one
//! unit per band, so predictions stay inside `(0, 1)`. Gradients are derived
//! by hand (reverse mode).
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix
//! (`fan_in x fan_out`, row-major) followed by its bias. Input features are
//! ordered channel-major, then neighborhood row, then neighborhood column.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi::{RgbImage, SpectralCube, Wavelengths};
use crate::metrics::{plane_stats, ssim_constants, ssim_global};

/// Layer sizes of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub patch_radius: usize,
    pub hidden: Vec<usize>,
    pub bands: usize,
}

impl Architecture {
    pub fn new(patch_radius: usize, hidden: Vec<usize>, bands: usize) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) || bands == 0 {
            return Err(Error::InvalidValue(format!(
                "architecture needs nonzero hidden widths and bands, got {hidden:?} / {bands}"
            )));
        }
        Ok(Self {
            patch_radius,
            hidden,
            bands,
        })
    }

    /// Radius 1 (3x3 neighborhood), two hidden layers of 64.
    pub fn standard(bands: usize) -> Self {
        Self {
            patch_radius: 1,
            hidden: vec![64, 64],
            bands,
        }
    }

    pub fn patch(&self) -> usize {
        2 * self.patch_radius + 1
    }

    pub fn inputs(&self) -> usize {
        3 * self.patch() * self.patch()
    }

    /// `[inputs, hidden..., bands]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.inputs()];
        d.extend(&self.hidden);
        d.push(self.bands);
        d
    }

    pub fn layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` per layer.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let dims = self.dims();
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let wo = offset;
                let bo = wo + fan_in * fan_out;
                offset = bo + fan_out;
                (wo, bo, fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Network weights in the flat layout described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    arch: Architecture,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    /// Glorot-uniform weights `U(±sqrt(6 / (fan_in + fan_out)))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(arch);
        for (wo, _, fan_in, fan_out) in params.arch.layout() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut params.values[wo..wo + fan_in * fan_out] {
                *v = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite parameter".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn weight(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (wo, bo, fan_in, fan_out) = self.arch.layout()[layer];
        let w =
            ArrayView2::from_shape((fan_in, fan_out), &self.values[wo..bo]).expect("layout matches parameter vector");
        let b = ArrayView1::from(&self.values[bo..bo + fan_out]);
        (w, b)
    }
}

impl Gradients {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Adds another gradient in place.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ShapeMismatch("gradients of different architectures".into()));
        }
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    arch: Architecture,
    height: usize,
    width: usize,
    /// Layer inputs followed by the final output, each `pixels x dim`.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Kept strictly inside (0, 1) even where f64 rounding would saturate.
fn logistic(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Neighborhood features for the `h x w` window at `(y0, x0)`, read from the
/// whole image with edge replication only at the true image border.
fn gather_inputs(arch: &Architecture, img: &RgbImage, y0: usize, x0: usize, h: usize, w: usize) -> Array2<f64> {
    let p = arch.patch_radius as isize;
    let patch = arch.patch();
    let (ih, iw) = (img.height() as isize, img.width() as isize);
    let mut x = Array2::zeros((h * w, arch.inputs()));
    for (row, mut feat) in x.axis_iter_mut(Axis(0)).enumerate() {
        let py = (y0 + row / w) as isize;
        let px = (x0 + row % w) as isize;
        for ch in 0..3 {
            let plane = img.channel(ch);
            for dy in -p..=p {
                let sy = (py + dy).clamp(0, ih - 1) as usize;
                for dx in -p..=p {
                    let sx = (px + dx).clamp(0, iw - 1) as usize;
                    let idx = ch * patch * patch + (dy + p) as usize * patch + (dx + p) as usize;
                    feat[idx] = plane[sy * iw as usize + sx];
                }
            }
        }
    }
    x
}

/// Predicts the full cube for an image.
pub fn forward(
    params: &ModelParams,
    img: &RgbImage,
    wavelengths: &Wavelengths,
) -> Result<(SpectralCube, ForwardCache)> {
    forward_region(params, img, 0, 0, img.height(), img.width(), wavelengths)
}

/// Predicts the `h x w` window at `(y0, x0)`. Neighborhoods reach outside the
/// window into the rest of the image, so tiled predictions agree with a
/// full-image pass.
pub fn forward_region(
    params: &ModelParams,
    img: &RgbImage,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    wavelengths: &Wavelengths,
) -> Result<(SpectralCube, ForwardCache)> {
    let arch = params.architecture();
    let patch = arch.patch();
    if img.height() < patch || img.width() < patch {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            patch,
        });
    }
    if wavelengths.len() != arch.bands {
        return Err(Error::DimensionMismatch(format!(
            "model predicts {} bands, wavelength grid has {}",
            arch.bands,
            wavelengths.len()
        )));
    }
    if y0 + h > img.height() || x0 + w > img.width() || h == 0 || w == 0 {
        return Err(Error::InvalidWindow(format!(
            "{h}x{w}@({y0},{x0}) outside {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut activations = Vec::with_capacity(arch.layers() + 1);
    activations.push(gather_inputs(arch, img, y0, x0, h, w));
    for layer in 0..arch.layers() {
        let (wt, b) = params.weight(layer);
        let mut z = activations[layer].dot(&wt);
        z += &b;
        if layer + 1 == arch.layers() {
            z.mapv_inplace(logistic);
        } else {
            z.mapv_inplace(f64::tanh);
        }
        activations.push(z);
    }
    let out = activations.last().expect("at least one layer");
    let n = h * w;
    let mut data = vec![0.0; n * arch.bands];
    for (p, row) in out.axis_iter(Axis(0)).enumerate() {
        for (c, v) in row.iter().enumerate() {
            data[c * n + p] = *v;
        }
    }
    let cube = SpectralCube::new(h, w, wavelengths.clone(), data)?;
    Ok((
        cube,
        ForwardCache {
            arch: arch.clone(),
            height: h,
            width: w,
            activations,
        },
    ))
}

/// Parameter gradient for a loss whose gradient on the predicted cube
/// (planar layout) is `output_grad`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
    let arch = params.architecture();
    if &cache.arch != arch {
        return Err(Error::CacheMismatch("cache built with another architecture".into()));
    }
    let n = cache.height * cache.width;
    if output_grad.len() != n * arch.bands {
        return Err(Error::CacheMismatch(format!(
            "gradient has {} entries, forward produced {}",
            output_grad.len(),
            n * arch.bands
        )));
    }
    let mut grads = Gradients::zeros(arch.clone());
    let layout = arch.layout();
    let out = &cache.activations[arch.layers()];
    // d loss / d pre-activation of the logistic layer.
    let mut delta = Array2::from_shape_fn((n, arch.bands), |(p, c)| {
        let o = out[[p, c]];
        output_grad[c * n + p] * o * (1.0 - o)
    });
    for layer in (0..arch.layers()).rev() {
        let input = &cache.activations[layer];
        let (wo, bo, fan_in, fan_out) = layout[layer];
        let gw = input.t().dot(&delta);
        let gb: Array1<f64> = delta.sum_axis(Axis(0));
        grads.values[wo..wo + fan_in * fan_out]
            .iter_mut()
            .zip(gw.iter())
            .for_each(|(g, v)| *g = *v);
        grads.values[bo..bo + fan_out]
            .iter_mut()
            .zip(gb.iter())
            .for_each(|(g, v)| *g = *v);
        if layer > 0 {
            let (wt, _) = params.weight(layer);
            let mut prev = delta.dot(&wt.t());
            prev.zip_mut_with(input, |d, h| *d *= 1.0 - h * h);
            delta = prev;
        }
    }
    Ok(grads)
}

/// Loss weighting factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Share of L1 in the supervised loss; the rest goes to `1 - SSIM`.
    pub lambda_sup: f64,
    /// Share of consistency in the unsupervised loss; the rest goes to alignment.
    pub lambda_un: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sup: 0.4,
            lambda_un: 0.3,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_sup: f64, lambda_un: f64) -> Result<Self> {
        for (name, v) in [("lambda_sup", lambda_sup), ("lambda_un", lambda_un)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidRange(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(Self { lambda_sup, lambda_un })
    }
}

/// A scalar loss and its gradient on the prediction (planar layout).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn l1_with_grad(pred: &SpectralCube, target: &SpectralCube) -> LossGrad {
    let n = pred.data().len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    LossGrad { loss: loss / n, grad }
}

/// Gradient of the global-statistics SSIM of one plane with respect to `x`.
fn ssim_plane_grad(x: &[f64], y: &[f64], out: &mut [f64], scale: f64) {
    let n = x.len() as f64;
    let s = plane_stats(x, y);
    let (c1, c2) = ssim_constants(1.0);
    let a1 = 2.0 * s.mean_x * s.mean_y + c1;
    let a2 = 2.0 * s.cov + c2;
    let b1 = s.mean_x * s.mean_x + s.mean_y * s.mean_y + c1;
    let b2 = s.var_x + s.var_y + c2;
    let ssim = a1 * a2 / (b1 * b2);
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        let d_num = (2.0 * s.mean_y / n) * a2 + a1 * 2.0 * (yi - s.mean_y) / n;
        let d_den = (2.0 * s.mean_x / n) / b1 + 2.0 * (xi - s.mean_x) / n / b2;
        *o += scale * (d_num / (b1 * b2) - ssim * d_den);
    }
}

/// `lambda_sup * L1 + (1 - lambda_sup) * (1 - SSIM)`, SSIM averaged over bands.
pub fn sup_loss(pred: &SpectralCube, gt: &SpectralCube, w: &LossWeights) -> Result<LossGrad> {
    pred.check_same_shape(gt)?;
    let l1 = l1_with_grad(pred, gt);
    let bands = pred.bands();
    let mut ssim_sum = 0.0;
    let mut ssim_grad = vec![0.0; pred.data().len()];
    let n = pred.pixels();
    for c in 0..bands {
        let (x, y) = (pred.band(c), gt.band(c));
        ssim_sum += ssim_global(x, y, 1.0)?;
        ssim_plane_grad(x, y, &mut ssim_grad[c * n..(c + 1) * n], 1.0 / bands as f64);
    }
    let ssim = ssim_sum / bands as f64;
    let lam = w.lambda_sup;
    let loss = lam * l1.loss + (1.0 - lam) * (1.0 - ssim);
    let grad = l1
        .grad
        .iter()
        .zip(&ssim_grad)
        .map(|(g1, gs)| lam * g1 - (1.0 - lam) * gs)
        .collect();
    Ok(LossGrad { loss, grad })
}

/// L1 between student and teacher predictions; the teacher is a constant.
pub fn con_loss(student: &SpectralCube, teacher: &SpectralCube) -> Result<LossGrad> {
    student.check_same_shape(teacher)?;
    Ok(l1_with_grad(student, teacher))
}

/// Per-term values of the training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub sup_src: f64,
    pub sup_tgt: f64,
    pub con: f64,
    pub sera: f64,
}

/// `(sup_src + sup_tgt) + lambda_un * con + (1 - lambda_un) * sera`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    (parts.sup_src + parts.sup_tgt) + (w.lambda_un * parts.con + (1.0 - w.lambda_un) * parts.sera)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPAD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters: `SPAD`, version, patch radius, hidden layer count,
/// hidden widths, bands, parameter count (all u32 LE), then f32 LE values.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let arch = params.architecture();
    let mut out = Vec::with_capacity(32 + 4 * params.values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = [CHECKPOINT_VERSION, arch.patch_radius as u32, arch.hidden.len() as u32];
    for v in header.into_iter().chain(arch.hidden.iter().map(|&h| h as u32)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(arch.bands as u32).to_le_bytes());
    out.extend_from_slice(&(params.values.len() as u32).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    let fail = |reason: String| Error::format(origin, reason);
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        let seen = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(fail(format!("bad magic {seen:?}, expected \"SPAD\"")));
    }
    let mut pos = 4;
    let mut next_u32 = || -> Result<u32> {
        let chunk = bytes.get(pos..pos + 4).ok_or_else(|| fail("truncated header".into()))?;
        pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    };
    let version = next_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let radius = next_u32()? as usize;
    let layers = next_u32()? as usize;
    if layers == 0 || layers > 64 {
        return Err(fail(format!("implausible hidden layer count {layers}")));
    }
    let hidden = (0..layers)
        .map(|_| next_u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let bands = next_u32()? as usize;
    let count = next_u32()? as usize;
    let arch = Architecture::new(radius, hidden, bands).map_err(|e| fail(e.to_string()))?;
    if count != arch.param_count() {
        return Err(fail(format!(
            "header declares {count} parameters, architecture needs {}",
            arch.param_count()
        )));
    }
    let body = &bytes[pos..];
    if body.len() != 4 * count {
        return Err(fail(format!(
            "expected {} payload bytes, found {}",
            4 * count,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite parameter".into()));
    }
    ModelParams::from_values(arch, values)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{l1, ssim_cube};

    fn small_arch() -> Architecture {
        Architecture::new(1, vec![6, 5], 4).unwrap()
    }

    fn random_rgb(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_cube(seed: u64, h: usize, w: usize, c: usize) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wl = Wavelengths::uniform(400.0, 10.0, c).unwrap();
        SpectralCube::new(h, w, wl, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_model_outputs_half() {
        let params = ModelParams::zeros(Architecture::standard(31));
        let (cube, _) = forward(&params, &random_rgb(1, 5, 7), &Wavelengths::visible_31()).unwrap();
        assert_eq!((cube.height(), cube.width(), cube.bands()), (5, 7, 31));
        assert!(cube.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn constant_input_constant_output() {
        let params = ModelParams::init(small_arch(), 3);
        let img = RgbImage::new(
            6,
            6,
            [0.2; 36].iter().chain(&[0.5; 36]).chain(&[0.9; 36]).copied().collect(),
        )
        .unwrap();
        let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
        let (cube, _) = forward(&params, &img, &wl).unwrap();
        for c in 0..4 {
            let b = cube.band(c);
            assert!(b.iter().all(|v| *v == b[0] && *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn too_small_images_are_rejected() {
        let params = ModelParams::init(small_arch(), 3);
        let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
        let err = forward(&params, &random_rgb(2, 2, 8), &wl).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { patch: 3, .. }));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let params = ModelParams::init(small_arch(), 4);
        let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
        let (_, cache) = forward(&params, &random_rgb(3, 5, 5), &wl).unwrap();
        let g = backward(&params, &cache, &vec![0.0; 100]).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
        assert!(matches!(
            backward(&params, &cache, &[0.0; 3]),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = small_arch();
        let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
        let img = random_rgb(5, 6, 6);
        let weights: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            (0..6 * 6 * 4).map(|_| rng.random::<f64>() - 0.5).collect()
        };
        // Linear functional of the output: loss = sum w_i * out_i.
        let loss = |p: &ModelParams| -> f64 {
            let (cube, _) = forward(p, &img, &wl).unwrap();
            cube.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let params = ModelParams::init(arch, 7);
        let (_, cache) = forward(&params, &img, &wl).unwrap();
        let g = backward(&params, &cache, &weights).unwrap();
        let h = 1e-5;
        for i in 0..params.values().len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = g.values()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn gradients_add_over_images() {
        let params = ModelParams::init(small_arch(), 8);
        let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
        let (a, b) = (random_rgb(9, 5, 5), random_rgb(10, 5, 5));
        let grad = vec![0.01; 100];
        let (_, ca) = forward(&params, &a, &wl).unwrap();
        let (_, cb) = forward(&params, &b, &wl).unwrap();
        let mut ga = backward(&params, &ca, &grad).unwrap();
        let gb = backward(&params, &cb, &grad).unwrap();
        // Stack the two images side by side is not equivalent (neighborhoods
        // cross the seam), so compare against the sum of per-image gradients.
        let sum: Vec<f64> = ga.values().iter().zip(gb.values()).map(|(x, y)| x + y).collect();
        ga.accumulate(&gb).unwrap();
        for (x, y) in ga.values().iter().zip(&sum) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sup_loss_identities() {
        let gt = random_cube(11, 5, 5, 4);
        let w = LossWeights::default();
        let same = sup_loss(&gt, &gt, &w).unwrap();
        assert!(same.loss.abs() < 1e-9);
        assert!(same.grad.iter().all(|g| g.abs() < 1e-9));

        let pred = random_cube(12, 5, 5, 4);
        let l1_only = sup_loss(&pred, &gt, &LossWeights::new(1.0, 0.3).unwrap()).unwrap();
        assert!((l1_only.loss - l1(&pred, &gt).unwrap()).abs() < 1e-12);
        let mixed = sup_loss(&pred, &gt, &w).unwrap();
        let expected = 0.4 * l1(&pred, &gt).unwrap() + 0.6 * (1.0 - ssim_cube(&pred, &gt).unwrap());
        assert!((mixed.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn sup_loss_gradient_matches_finite_differences() {
        let gt = random_cube(13, 4, 5, 3);
        let pred = random_cube(14, 4, 5, 3);
        let w = LossWeights::default();
        let analytic = sup_loss(&pred, &gt, &w).unwrap().grad;
        let h = 1e-6;
        for i in 0..pred.data().len() {
            if (pred.data()[i] - gt.data()[i]).abs() < 1e-4 {
                continue;
            }
            let bump = |d: f64| {
                let mut v = pred.data().to_vec();
                v[i] += d;
                let c = SpectralCube::new(4, 5, pred.wavelengths().clone(), v).unwrap();
                sup_loss(&c, &gt, &w).unwrap().loss
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "entry {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn consistency_loss() {
        let s = random_cube(15, 4, 4, 3);
        assert_eq!(con_loss(&s, &s).unwrap().loss, 0.0);
        let t = SpectralCube::new(
            4,
            4,
            s.wavelengths().clone(),
            s.data().iter().map(|v| v + 0.1).collect(),
        )
        .unwrap();
        let out = con_loss(&s, &t).unwrap();
        assert!((out.loss - 0.1).abs() < 1e-12);
        assert!(out.grad.iter().all(|g| (*g + 1.0 / 48.0).abs() < 1e-15));
        let u = random_cube(16, 4, 4, 3);
        assert!((con_loss(&s, &u).unwrap().loss - l1(&s, &u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let parts = LossParts {
            sup_src: 0.2,
            sup_tgt: 0.1,
            con: 0.4,
            sera: 0.6,
        };
        assert!((total_loss(&parts, &w) - 0.84).abs() < 1e-12);
        let only_con = LossWeights::new(0.4, 1.0).unwrap();
        assert!((total_loss(&parts, &only_con) - (0.3 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let params = ModelParams::init(small_arch(), 20);
        let bytes = encode_checkpoint(&params);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.architecture(), params.architecture());
        for (a, b) in back.values().iter().zip(params.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..10], Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn outputs_stay_in_open_unit_interval(seed: u64, scale in 0.1f64..20.0) {
                let mut params = ModelParams::init(small_arch(), seed);
                params.values_mut().iter_mut().for_each(|v| *v *= scale);
                let wl = Wavelengths::uniform(400.0, 10.0, 4).unwrap();
                let (cube, _) = forward(&params, &random_rgb(seed ^ 1, 4, 4), &wl).unwrap();
                prop_assert!(cube.data().iter().all(|v| *v > 0.0 && *v < 1.0));
            }

            #[test]
            fn total_loss_monotone(a in 0.0f64..2.0, b in 0.0f64..2.0, c in 0.0f64..2.0, d in 0.0f64..2.0, bump in 0.0f64..1.0, which in 0usize..4) {
                let w = LossWeights::default();
                let base = LossParts { sup_src: a, sup_tgt: b, con: c, sera: d };
                let mut more = base;
                match which { 0 => more.sup_src += bump, 1 => more.sup_tgt += bump, 2 => more.con += bump, _ => more.sera += bump }
                prop_assert!(total_loss(&more, &w) >= total_loss(&base, &w));
            }
        }
    }
}
