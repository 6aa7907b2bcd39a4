//! Multi-run experiments and their mean ± std summaries.

use std::fmt::Write as _;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::hsi::partition_from_wavelengths;
use crate::metrics::{MetricReport, SAM_EPS};
use crate::sdm::{dataset_density, generate_mask, masking_ratios, SpectralDensity};
use crate::trainer::{train_loop, TrainConfig, TrainOutcome};

/// Sample mean and standard deviation (n - 1 denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub labeled: usize,
    pub ssim: Stat,
    pub sam: Stat,
    pub psnr: Stat,
    pub l1: Stat,
    pub runs: usize,
}

/// Per-method summaries keyed by `(method, labeled)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn add(&mut self, method: &str, labeled: usize, runs: &[MetricReport]) -> Result<()> {
        if runs.is_empty() {
            return Err(Error::EmptyInput("runs for report row"));
        }
        if self.rows.iter().any(|r| r.method == method && r.labeled == labeled) {
            return Err(Error::InvalidValue(format!("duplicate report row {method}/{labeled}")));
        }
        let col = |f: fn(&MetricReport) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        self.rows.push(ReportRow {
            method: method.to_string(),
            labeled,
            ssim: col(|r| r.ssim),
            sam: col(|r| r.sam),
            psnr: col(|r| r.psnr),
            l1: col(|r| r.l1),
            runs: runs.len(),
        });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,labeled,runs,ssim_mean,ssim_std,sam_mean,sam_std,psnr_mean,psnr_std,l1_mean,l1_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.labeled,
                r.runs,
                r.ssim.mean,
                r.ssim.std,
                r.sam.mean,
                r.sam.std,
                r.psnr.mean,
                r.psnr.std,
                r.l1.mean,
                r.l1.std
            );
        }
        out
    }
}

/// The four module combinations, baseline first.
pub const ABLATIONS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("baseline+sdm", true, false),
    ("baseline+sera", false, true),
    ("baseline+sdm+sera", true, true),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub method: &'static str,
    pub seed: u64,
    pub report: MetricReport,
}

fn final_report(out: &TrainOutcome, cfg: &TrainConfig, data: &Dataset) -> Result<MetricReport> {
    match out.history.last() {
        Some((it, r)) if *it == cfg.iterations => Ok(*r),
        _ => crate::trainer::evaluate(crate::trainer::eval_params(&out.state, cfg), &data.validation, cfg),
    }
}

/// Trains every module combination for each seed.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for (method, sdm, sera) in ABLATIONS {
            let cfg = TrainConfig {
                seed,
                enable_sdm: sdm,
                enable_sera: sera,
                ..base.clone()
            };
            let out = train_loop(&cfg, data)?;
            runs.push(AblationRun {
                method,
                seed,
                report: final_report(&out, &cfg, data)?,
            });
        }
    }
    Ok(runs)
}

pub fn ablation_report(runs: &[AblationRun], labeled: usize) -> Result<RunReport> {
    let mut report = RunReport::default();
    for (method, _, _) in ABLATIONS {
        let rows: Vec<MetricReport> = runs.iter().filter(|r| r.method == method).map(|r| r.report).collect();
        if !rows.is_empty() {
            report.add(method, labeled, &rows)?;
        }
    }
    Ok(report)
}

/// Mean-rate sweep points, in percent.
pub const SWEEP_RATES: [u32; 5] = [10, 30, 50, 70, 90];
pub const SWEEP_WIDTH: f64 = 0.4;

/// `[r_min, r_max]` whose density-mapped ratios average to `rate`.
///
/// Ratios are `r_min + width * n_b` with `n_b` the min-max normalized density,
/// so the window sits at `r_min = rate - width * mean(n)`. Where that leaves
/// `[0, 1]`, the window is pinned to the violated bound and narrowed so the
/// mean still equals `rate`.
pub fn sweep_window(rate: f64, density: &SpectralDensity, width: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rate) || !(0.0..=1.0).contains(&width) {
        return Err(Error::InvalidRange(format!(
            "rate {rate} / width {width} outside [0, 1]"
        )));
    }
    let d = density.as_rgb();
    let (lo_d, hi_d) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // Equal densities map to the window midpoint.
    let m = if hi_d - lo_d > 0.0 {
        d.iter().map(|v| (v - lo_d) / (hi_d - lo_d)).sum::<f64>() / 3.0
    } else {
        0.5
    };
    let lo = rate - width * m;
    let hi = lo + width;
    if lo >= 0.0 && hi <= 1.0 {
        return Ok((lo, hi));
    }
    if lo < 0.0 {
        let hi = if m > 0.0 { (rate / m).min(1.0) } else { rate };
        return Ok((0.0, hi));
    }
    let lo = if m < 1.0 {
        ((rate - m) / (1.0 - m)).max(0.0)
    } else {
        rate
    };
    Ok((lo, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    /// Requested mean masking rate, as a fraction.
    pub rate: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Mean masked fraction of a crop-sized mask drawn with this window.
    pub realized: f64,
    pub report: MetricReport,
}

/// Density used for masking: the mean over the labeled target cubes.
pub fn target_density(data: &Dataset) -> Result<SpectralDensity> {
    let part = partition_from_wavelengths(&data.wavelengths)?;
    let cubes: Vec<_> = data.labeled_target.iter().map(|(_, c)| c.clone()).collect();
    dataset_density(&cubes, &part, SAM_EPS)
}

/// Trains with masking enabled at each mean rate, for each seed.
pub fn run_sweep(base: &TrainConfig, data: &Dataset, seeds: &[u64], rates: &[u32]) -> Result<Vec<SweepRow>> {
    let density = target_density(data)?;
    let mut rates = rates.to_vec();
    rates.sort_unstable();
    rates.dedup();
    let mut rows = Vec::new();
    for &seed in seeds {
        for &pct in &rates {
            let rate = pct as f64 / 100.0;
            let (r_min, r_max) = sweep_window(rate, &density, SWEEP_WIDTH)?;
            let cfg = TrainConfig {
                seed,
                enable_sdm: true,
                r_min,
                r_max,
                ..base.clone()
            };
            let ratios = masking_ratios(&density, r_min, r_max)?;
            let realized = generate_mask(cfg.crop, cfg.crop, &ratios, cfg.block_size, seed)?.masked_fraction();
            let out = train_loop(&cfg, data)?;
            rows.push(SweepRow {
                seed,
                rate,
                r_min,
                r_max,
                realized,
                report: final_report(&out, &cfg, data)?,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "seed,rate,r_min,r_max,realized_rate,ssim,sam,psnr";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed, r.rate, r.r_min, r.r_max, r.realized, r.report.ssim, r.report.sam, r.report.psnr
        );
    }
    out
}
