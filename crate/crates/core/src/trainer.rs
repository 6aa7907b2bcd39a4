//! Mean-teacher training with spectral density masking and endmember alignment.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, iteration,
//! ...)` via [`derive_seed`], so turning a module on or off never shifts the
//! draws of another and ablation runs stay paired.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::hsi::{partition_from_wavelengths, RgbImage, SpectralCube, Wavelengths};
use crate::metrics::{report, MetricReport, SAM_EPS};
use crate::model::{
    backward, con_loss, forward, forward_region, sup_loss, total_loss, Architecture, Gradients, LossParts, LossWeights,
    ModelParams,
};
use crate::sdm::{apply_mask, dataset_density, generate_mask, masking_ratios, MaskPlan, SpectralDensity};
use crate::seed::derive_seed;
use crate::sera::{feature_backward, init_bank, sera_loss, spectral_feature, EndmemberBank};

const STREAM_INIT: u64 = 1;
const STREAM_BANK: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_AUG: u64 = 4;

const AUG_GEOM: u64 = 0;
const AUG_WEAK: u64 = 1;
const AUG_STRONG: u64 = 2;
const AUG_MASK: u64 = 3;

/// Which network produces evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Teacher,
    Student,
}

impl FromStr for EvalModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student" => Ok(Self::Student),
            _ => Err(Error::InvalidValue(format!("eval model {s:?} is not teacher|student"))),
        }
    }
}

impl EvalModel {
    fn name(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch_src: usize,
    pub batch_unlabeled: usize,
    pub batch_labeled_tgt: usize,
    pub m_ema: f64,
    pub m_end: f64,
    pub lambda_sup: f64,
    pub lambda_un: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub block_size: usize,
    pub k_endmembers: usize,
    pub n_sample: usize,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub crop: usize,
    pub stride: usize,
    pub seed: u64,
    pub enable_sdm: bool,
    pub enable_sera: bool,
    pub eval_every: usize,
    pub eval_model: EvalModel,
    pub patch_radius: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr_init: 1e-4,
            lr_final: 1e-6,
            batch_src: 8,
            batch_unlabeled: 8,
            batch_labeled_tgt: 1,
            m_ema: 0.99,
            m_end: 0.9,
            lambda_sup: 0.4,
            lambda_un: 0.3,
            r_min: 0.5,
            r_max: 0.9,
            block_size: 8,
            k_endmembers: 16,
            n_sample: 4096,
            sigma_weak: 0.01,
            sigma_strong: 0.05,
            crop: 64,
            stride: 32,
            seed: 0,
            enable_sdm: true,
            enable_sera: true,
            eval_every: 100,
            eval_model: EvalModel::Teacher,
            patch_radius: 1,
            hidden: vec![64, 64],
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidValue(format!("{key}: {v:?} is not a boolean"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::InvalidValue(format!("{key}: {v:?}: {e}")))
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sup: self.lambda_sup,
            lambda_un: self.lambda_un,
        }
    }

    pub fn architecture(&self, bands: usize) -> Result<Architecture> {
        Architecture::new(self.patch_radius, self.hidden.clone(), bands)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "iterations" => self.iterations = parse_num(key, v)?,
            "lr_init" => self.lr_init = parse_num(key, v)?,
            "lr_final" => self.lr_final = parse_num(key, v)?,
            "batch_src" => self.batch_src = parse_num(key, v)?,
            "batch_unlabeled" => self.batch_unlabeled = parse_num(key, v)?,
            "batch_labeled_tgt" => self.batch_labeled_tgt = parse_num(key, v)?,
            "m_ema" => self.m_ema = parse_num(key, v)?,
            "m_end" => self.m_end = parse_num(key, v)?,
            "lambda_sup" => self.lambda_sup = parse_num(key, v)?,
            "lambda_un" => self.lambda_un = parse_num(key, v)?,
            "r_min" => self.r_min = parse_num(key, v)?,
            "r_max" => self.r_max = parse_num(key, v)?,
            "block_size" => self.block_size = parse_num(key, v)?,
            "k_endmembers" => self.k_endmembers = parse_num(key, v)?,
            "n_sample" => self.n_sample = parse_num(key, v)?,
            "sigma_weak" => self.sigma_weak = parse_num(key, v)?,
            "sigma_strong" => self.sigma_strong = parse_num(key, v)?,
            "crop" => self.crop = parse_num(key, v)?,
            "stride" => self.stride = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "enable_sdm" => self.enable_sdm = parse_bool(key, v)?,
            "enable_sera" => self.enable_sera = parse_bool(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_model" => self.eval_model = v.parse()?,
            "patch_radius" => self.patch_radius = parse_num(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|h| parse_num(key, h.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            other => return Err(Error::InvalidValue(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidValue(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key=value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let hidden = self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let fields: [(&str, String); 26] = [
            ("iterations", self.iterations.to_string()),
            ("lr_init", self.lr_init.to_string()),
            ("lr_final", self.lr_final.to_string()),
            ("batch_src", self.batch_src.to_string()),
            ("batch_unlabeled", self.batch_unlabeled.to_string()),
            ("batch_labeled_tgt", self.batch_labeled_tgt.to_string()),
            ("m_ema", self.m_ema.to_string()),
            ("m_end", self.m_end.to_string()),
            ("lambda_sup", self.lambda_sup.to_string()),
            ("lambda_un", self.lambda_un.to_string()),
            ("r_min", self.r_min.to_string()),
            ("r_max", self.r_max.to_string()),
            ("block_size", self.block_size.to_string()),
            ("k_endmembers", self.k_endmembers.to_string()),
            ("n_sample", self.n_sample.to_string()),
            ("sigma_weak", self.sigma_weak.to_string()),
            ("sigma_strong", self.sigma_strong.to_string()),
            ("crop", self.crop.to_string()),
            ("stride", self.stride.to_string()),
            ("seed", self.seed.to_string()),
            ("enable_sdm", self.enable_sdm.to_string()),
            ("enable_sera", self.enable_sera.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_model", self.eval_model.name().to_string()),
            ("patch_radius", self.patch_radius.to_string()),
            ("hidden", hidden),
        ];
        fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("m_ema", self.m_ema),
            ("m_end", self.m_end),
            ("lambda_sup", self.lambda_sup),
            ("lambda_un", self.lambda_un),
            ("r_min", self.r_min),
            ("r_max", self.r_max),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidRange(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.r_min > self.r_max {
            return Err(Error::InvalidRange(format!(
                "r_min {} > r_max {}",
                self.r_min, self.r_max
            )));
        }
        for (name, v) in [
            ("batch_src", self.batch_src),
            ("batch_unlabeled", self.batch_unlabeled),
            ("batch_labeled_tgt", self.batch_labeled_tgt),
            ("crop", self.crop),
            ("stride", self.stride),
            ("block_size", self.block_size),
            ("k_endmembers", self.k_endmembers),
            ("n_sample", self.n_sample),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::InvalidValue(format!("{name} must be at least 1")));
            }
        }
        if self.stride > self.crop {
            return Err(Error::InvalidWindow(format!(
                "stride {} exceeds crop {}",
                self.stride, self.crop
            )));
        }
        if self.block_size > self.crop {
            return Err(Error::InvalidBlockSize {
                block: self.block_size,
                height: self.crop,
                width: self.crop,
            });
        }
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_final", self.lr_final),
            ("sigma_weak", self.sigma_weak),
            ("sigma_strong", self.sigma_strong),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        if self.lr_final > self.lr_init {
            return Err(Error::InvalidRange(format!(
                "lr_final {} above lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidValue("hidden widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at step `iterations`.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.iterations == 0 {
        return cfg.lr_init;
    }
    let t = (step.min(cfg.iterations)) as f64 / cfg.iterations as f64;
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (PI * t).cos())
}

/// Flips followed by `rot90` clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometry {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90: u8,
}

/// Planar data with `planes` planes of `h x w`.
fn flip_planes(data: &[f64], h: usize, w: usize, horizontal: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// One clockwise quarter turn; the result is `w x h`.
fn rotate_planes(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..w {
            for x in 0..h {
                dst[y * h + x] = src[(h - 1 - x) * w + y];
            }
        }
    }
    out
}

impl Geometry {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.random(),
            flip_v: rng.random(),
            rot90: rng.random_range(0..4),
        }
    }

    fn transform(&self, data: &[f64], h: usize, w: usize, inverse: bool) -> (Vec<f64>, usize, usize) {
        let (mut d, mut h, mut w) = (data.to_vec(), h, w);
        let flips = |d: Vec<f64>, h, w| {
            let d = if self.flip_h { flip_planes(&d, h, w, true) } else { d };
            if self.flip_v {
                flip_planes(&d, h, w, false)
            } else {
                d
            }
        };
        let turns = if inverse {
            (4 - self.rot90 % 4) % 4
        } else {
            self.rot90 % 4
        };
        if !inverse {
            d = flips(d, h, w);
        }
        for _ in 0..turns {
            d = rotate_planes(&d, h, w);
            std::mem::swap(&mut h, &mut w);
        }
        if inverse {
            // Flips commute with each other, so the same helper undoes them.
            d = flips(d, h, w);
        }
        (d, h, w)
    }

    pub fn apply_rgb(&self, img: &RgbImage) -> RgbImage {
        let (d, h, w) = self.transform(img.data(), img.height(), img.width(), false);
        RgbImage::new(h, w, d).expect("permutation keeps values valid")
    }

    pub fn invert_rgb(&self, img: &RgbImage) -> RgbImage {
        let (d, h, w) = self.transform(img.data(), img.height(), img.width(), true);
        RgbImage::new(h, w, d).expect("permutation keeps values valid")
    }

    pub fn apply_cube(&self, cube: &SpectralCube) -> SpectralCube {
        let (d, h, w) = self.transform(cube.data(), cube.height(), cube.width(), false);
        SpectralCube::new(h, w, cube.wavelengths().clone(), d).expect("permutation keeps values valid")
    }
}

/// Two views of one unlabeled crop.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub student: RgbImage,
    pub teacher: RgbImage,
    pub geometry: Geometry,
    /// Mask applied to the student view, when masking is enabled.
    pub mask: Option<MaskPlan>,
}

fn add_noise(img: &mut RgbImage, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
}

/// Shared geometric transform for both views; weak noise for the teacher,
/// strong noise then density-driven block masking for the student.
pub fn augment_pair(rgb: &RgbImage, cfg: &TrainConfig, density: &SpectralDensity, seed: u64) -> Result<AugmentedPair> {
    let mut geom_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[AUG_GEOM]));
    let geometry = Geometry::random(&mut geom_rng);
    let base = geometry.apply_rgb(rgb);
    let mut teacher = base.clone();
    add_noise(&mut teacher, cfg.sigma_weak, derive_seed(seed, &[AUG_WEAK]));
    let mut student = base;
    add_noise(&mut student, cfg.sigma_strong, derive_seed(seed, &[AUG_STRONG]));
    let mask = if cfg.enable_sdm {
        let ratios = masking_ratios(density, cfg.r_min, cfg.r_max)?;
        let plan = generate_mask(
            student.height(),
            student.width(),
            &ratios,
            cfg.block_size,
            derive_seed(seed, &[AUG_MASK]),
        )?;
        student = apply_mask(&student, &plan)?;
        Some(plan)
    } else {
        None
    };
    Ok(AugmentedPair {
        student,
        teacher,
        geometry,
        mask,
    })
}

/// `teacher <- m * teacher + (1 - m) * student`.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, m: f64) -> Result<ModelParams> {
    if teacher.architecture() != student.architecture() {
        return Err(Error::ShapeMismatch("teacher and student architectures differ".into()));
    }
    let mut out = teacher.clone();
    out.values_mut()
        .iter_mut()
        .zip(student.values())
        .for_each(|(t, s)| *t = m * *t + (1.0 - m) * s);
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        if params.architecture() != grads.architecture() || self.m.len() != grads.values().len() {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub optimizer: Adam,
    /// Present only when alignment is enabled.
    pub bank: Option<EndmemberBank>,
    pub iteration: usize,
    /// Target density from the labeled target cubes, fixed for the run.
    pub density: SpectralDensity,
    pub wavelengths: Wavelengths,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let wl = data.wavelengths.clone();
        let arch = cfg.architecture(wl.len())?;
        let student = ModelParams::init(arch, derive_seed(cfg.seed, &[STREAM_INIT]));
        let part = partition_from_wavelengths(&wl)?;
        let target_cubes: Vec<SpectralCube> = data.labeled_target.iter().map(|(_, c)| c.clone()).collect();
        let density = dataset_density(&target_cubes, &part, SAM_EPS)?;
        let bank = if cfg.enable_sera {
            let labeled: Vec<SpectralCube> = data
                .source
                .iter()
                .chain(&data.labeled_target)
                .map(|(_, c)| c.clone())
                .collect();
            Some(init_bank(
                &labeled,
                cfg.k_endmembers,
                cfg.n_sample,
                cfg.m_end,
                derive_seed(cfg.seed, &[STREAM_BANK]),
            )?)
        } else {
            None
        };
        Ok(Self {
            teacher: student.clone(),
            optimizer: Adam::new(student.values().len()),
            student,
            bank,
            iteration: 0,
            density,
            wavelengths: wl,
        })
    }
}

/// Cropped samples for one step.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub source: Vec<(RgbImage, SpectralCube)>,
    pub labeled_target: Vec<(RgbImage, SpectralCube)>,
    pub unlabeled: Vec<RgbImage>,
}

fn crop_origin(h: usize, w: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    if crop > h || crop > w {
        return Err(Error::InvalidWindow(format!("crop {crop} larger than image {h}x{w}")));
    }
    Ok((rng.random_range(0..=h - crop), rng.random_range(0..=w - crop)))
}

fn draw_pairs(
    pool: &[(RgbImage, SpectralCube)],
    n: usize,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(RgbImage, SpectralCube)>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("labeled pool"));
    }
    (0..n)
        .map(|_| {
            let (rgb, cube) = &pool[rng.random_range(0..pool.len())];
            let (y, x) = crop_origin(rgb.height(), rgb.width(), crop, rng)?;
            Ok((rgb.crop(y, x, crop, crop)?, cube.crop(y, x, crop, crop)?))
        })
        .collect()
}

/// Random crops (with replacement) for iteration `iteration`.
pub fn draw_batch(data: &Dataset, cfg: &TrainConfig, iteration: usize) -> Result<TrainBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_BATCH, iteration as u64]));
    let source = draw_pairs(&data.source, cfg.batch_src, cfg.crop, &mut rng)?;
    let labeled_target = draw_pairs(&data.labeled_target, cfg.batch_labeled_tgt, cfg.crop, &mut rng)?;
    if data.unlabeled.is_empty() {
        return Err(Error::EmptyInput("unlabeled pool"));
    }
    let unlabeled = (0..cfg.batch_unlabeled)
        .map(|_| {
            let img = &data.unlabeled[rng.random_range(0..data.unlabeled.len())];
            let (y, x) = crop_origin(img.height(), img.width(), cfg.crop, &mut rng)?;
            img.crop(y, x, cfg.crop, cfg.crop)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainBatch {
        source,
        labeled_target,
        unlabeled,
    })
}

/// Loss terms of one step, each averaged over its stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub total: f64,
    pub lr: f64,
}

fn aug_seed(cfg: &TrainConfig, iteration: usize, stream: u64, index: usize) -> u64 {
    derive_seed(cfg.seed, &[STREAM_AUG, iteration as u64, stream, index as u64])
}

/// One optimization step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &TrainBatch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.source.is_empty() || batch.labeled_target.is_empty() || batch.unlabeled.is_empty() {
        return Err(Error::EmptyInput("training batch stream"));
    }
    let wl = state.wavelengths.clone();
    let w = cfg.weights();
    let it = state.iteration;

    // Predictions the total loss depends on, with their gradients so far.
    let mut preds = Vec::new();
    let mut caches = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut parts = LossParts::default();

    for (stream, pairs) in [(0u64, &batch.source), (1, &batch.labeled_target)] {
        let scale = 1.0 / pairs.len() as f64;
        let mut acc = 0.0;
        for (i, (rgb, cube)) in pairs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(aug_seed(cfg, it, stream, i));
            let geom = Geometry::random(&mut rng);
            let (pred, cache) = forward(&state.student, &geom.apply_rgb(rgb), &wl)?;
            let lg = sup_loss(&pred, &geom.apply_cube(cube), &w)?;
            acc += lg.loss * scale;
            grads.push(lg.grad.iter().map(|g| g * scale).collect());
            preds.push(pred);
            caches.push(cache);
        }
        if stream == 0 {
            parts.sup_src = acc;
        } else {
            parts.sup_tgt = acc;
        }
    }

    let scale = 1.0 / batch.unlabeled.len() as f64;
    for (i, rgb) in batch.unlabeled.iter().enumerate() {
        let pair = augment_pair(rgb, cfg, &state.density, aug_seed(cfg, it, 2, i))?;
        let (teacher_pred, _) = forward(&state.teacher, &pair.teacher, &wl)?;
        let (pred, cache) = forward(&state.student, &pair.student, &wl)?;
        let lg = con_loss(&pred, &teacher_pred)?;
        parts.con += lg.loss * scale;
        grads.push(lg.grad.iter().map(|g| w.lambda_un * g * scale).collect());
        preds.push(pred);
        caches.push(cache);
    }

    let mut alignment = None;
    if let Some(bank) = &state.bank {
        let features: Vec<Vec<f64>> = preds.iter().map(spectral_feature).collect();
        let out = sera_loss(&features, bank)?;
        parts.sera = out.loss;
        for ((g, pred), fg) in grads.iter_mut().zip(&preds).zip(&out.grads) {
            let back = feature_backward(pred, fg);
            g.iter_mut().zip(&back).for_each(|(a, b)| *a += (1.0 - w.lambda_un) * b);
        }
        alignment = Some((features, out.assignment));
    }

    let total = total_loss(&parts, &w);
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: it,
            detail: format!("{parts:?}"),
        });
    }

    let mut grad_sum = Gradients::zeros(state.student.architecture().clone());
    for (cache, g) in caches.iter().zip(&grads) {
        grad_sum.accumulate(&backward(&state.student, cache, g)?)?;
    }
    if grad_sum.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: it,
            detail: "non-finite gradient".into(),
        });
    }
    let lr = learning_rate(cfg, it);
    state.optimizer.step(&mut state.student, &grad_sum, lr)?;
    state.teacher = ema_update(&state.teacher, &state.student, cfg.m_ema)?;
    if let (Some(bank), Some((features, assignment))) = (&mut state.bank, alignment) {
        bank.momentum_update(&features, &assignment)?;
    }
    state.iteration += 1;
    Ok(LossBreakdown { parts, total, lr })
}

/// Window origins along one axis; the last window is snapped to the edge.
fn window_starts(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - crop).step_by(stride).collect();
    if *starts.last().expect("at least origin") != len - crop {
        starts.push(len - crop);
    }
    starts
}

/// Tiled prediction with uniform averaging over overlaps.
pub fn sliding_window_predict(
    params: &ModelParams,
    img: &RgbImage,
    crop: usize,
    stride: usize,
    wavelengths: &Wavelengths,
) -> Result<SpectralCube> {
    let (h, w) = (img.height(), img.width());
    if crop == 0 || crop > h || crop > w {
        return Err(Error::InvalidWindow(format!("crop {crop} does not fit {h}x{w}")));
    }
    if stride == 0 || stride > crop {
        return Err(Error::InvalidWindow(format!("stride {stride} must be in 1..={crop}")));
    }
    let c = wavelengths.len();
    let n = h * w;
    let mut sum = vec![0.0; c * n];
    let mut count = vec![0u32; n];
    for &y0 in &window_starts(h, crop, stride) {
        for &x0 in &window_starts(w, crop, stride) {
            let (tile, _) = forward_region(params, img, y0, x0, crop, crop, wavelengths)?;
            for y in 0..crop {
                for x in 0..crop {
                    let p = (y0 + y) * w + x0 + x;
                    count[p] += 1;
                    for b in 0..c {
                        sum[b * n + p] += tile.get(y, x, b);
                    }
                }
            }
        }
    }
    for b in 0..c {
        sum[b * n..(b + 1) * n]
            .iter_mut()
            .zip(&count)
            .for_each(|(s, k)| *s /= *k as f64);
    }
    SpectralCube::new(h, w, wavelengths.clone(), sum)
}

/// Mean of per-pair metrics over sliding-window predictions. The window is
/// shrunk to fit images smaller than the configured crop.
pub fn evaluate(params: &ModelParams, pairs: &[(RgbImage, SpectralCube)], cfg: &TrainConfig) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation pairs"));
    }
    let reports = pairs
        .iter()
        .map(|(rgb, gt)| {
            let crop = cfg.crop.min(rgb.height()).min(rgb.width());
            let stride = cfg.stride.min(crop);
            let pred = sliding_window_predict(params, rgb, crop, stride, gt.wavelengths())?;
            report(&pred, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

pub fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    MetricReport {
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        sam: reports.iter().map(|r| r.sam).sum::<f64>() / n,
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        l1: reports.iter().map(|r| r.l1).sum::<f64>() / n,
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed steps.
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub eval: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    /// `(iteration, report)` every `eval_every` steps.
    pub history: Vec<(usize, MetricReport)>,
}

pub fn eval_params<'a>(state: &'a TrainState, cfg: &TrainConfig) -> &'a ModelParams {
    match cfg.eval_model {
        EvalModel::Teacher => &state.teacher,
        EvalModel::Student => &state.student,
    }
}

/// Runs `cfg.iterations` steps, evaluating on the validation pairs every
/// `cfg.eval_every` steps.
pub fn train_loop(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut state = TrainState::init(cfg, data)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut history = Vec::new();
    for it in 0..cfg.iterations {
        let batch = draw_batch(data, cfg, it)?;
        let loss = train_step(&mut state, &batch, cfg)?;
        let done = it + 1;
        let eval = if done % cfg.eval_every == 0 {
            let r = evaluate(eval_params(&state, cfg), &data.validation, cfg)?;
            history.push((done, r));
            Some(r)
        } else {
            None
        };
        log.push(StepRecord {
            iteration: done,
            loss,
            eval,
        });
    }
    Ok(TrainOutcome { state, log, history })
}

pub const METRICS_HEADER: &str = "iteration,lr,sup_src,sup_tgt,con,sera_loss,total,ssim,sam,psnr,l1";

/// CSV text of a training log; metric cells are empty on rows without evaluation.
pub fn metrics_csv(log: &[StepRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in log {
        let p = r.loss.parts;
        let _ = write!(
            out,
            "{},{:e},{},{},{},{},{}",
            r.iteration, r.loss.lr, p.sup_src, p.sup_tgt, p.con, p.sera, r.loss.total
        );
        match r.eval {
            Some(m) => {
                let _ = writeln!(out, ",{},{},{},{}", m.ssim, m.sam, m.psnr, m.l1);
            }
            None => out.push_str(",,,,\n"),
        }
    }
    out
}
