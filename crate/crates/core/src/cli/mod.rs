//! Command-line interface.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
//! Diagnostics go to standard error; results go to files or standard output.

pub mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datagen::{
    build_manifest_sized, manifest::DEFAULT_SIZE, manifest::MANIFEST_FILE, read_cube, Counts, Dataset, DatasetManifest,
};
use crate::error::{Error, Result};
use crate::hsi::{partition_from_wavelengths, SpectralCube};
use crate::metrics::{error_map, report as metric_report, ErrorKind, MetricReport, SAM_EPS};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::sdm::{dataset_density, generate_mask, masking_ratios, MaskRatios};
use crate::sera::init_bank;
use crate::trainer::{eval_params, evaluate, metrics_csv, sliding_window_predict, train_loop, TrainConfig, TrainState};

use report::{ablation_report, run_ablation, run_sweep, sweep_csv, RunReport, SWEEP_RATES};

#[derive(Debug, Parser)]
#[command(
    name = "spectral-adapt",
    version,
    about = "Semi-supervised RGB to hyperspectral reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain dataset and its manifest.
    GenData(GenDataArgs),
    /// Spectral density per RGB region and the resulting masking ratios.
    Density(DensityArgs),
    /// Extract an endmember bank and write it as CSV.
    Endmembers(EndmemberArgs),
    /// Draw one block mask and write it as a PGM.
    MaskPreview(MaskPreviewArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate checkpoints on the target validation pairs.
    Eval(EvalArgs),
    /// Train at several mean masking rates.
    SweepMaskrate(SweepArgs),
    /// Train the four module combinations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// source,labeled_target,unlabeled_target,validation
    #[arg(long, default_value = "40,3,40,8")]
    pub counts: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cube height and width in pixels.
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    /// Use the manifest's labeled target cubes.
    #[arg(long, conflicts_with = "cubes")]
    pub manifest: Option<PathBuf>,
    /// HSC1 cube files.
    pub cubes: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub r_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub r_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EndmemberArgs {
    /// Use the manifest's labeled source and target cubes.
    #[arg(long, conflicts_with = "cubes")]
    pub manifest: Option<PathBuf>,
    pub cubes: Vec<PathBuf>,
    #[arg(long, short = 'k', default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 4096)]
    pub n_sample: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MaskPreviewArgs {
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub block_size: usize,
    /// Explicit red,green,blue ratios.
    #[arg(long, conflicts_with = "manifest")]
    pub ratios: Option<String>,
    /// Derive ratios from the manifest's labeled target density.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub r_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub r_max: f64,
    /// PGM with the red, green and blue masks stacked vertically.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Options shared by every training command.
#[derive(Debug, Args)]
pub struct TrainOptions {
    /// Dataset manifest, or the directory containing it.
    #[arg(long)]
    pub manifest: PathBuf,
    /// key=value configuration overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Use only the first N labeled target samples.
    #[arg(long)]
    pub labeled_target: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub sdm: Option<Switch>,
    #[arg(long, value_enum)]
    pub sera: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// One checkpoint per run; rows aggregate over them.
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Vec<PathBuf>,
    /// Report label for the checkpoints.
    #[arg(long, default_value = "model")]
    pub method: String,
    /// Use ground truth as the prediction.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub labeled_target: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mean masking rates in percent.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_manifest(p: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(&manifest_path(p))?;
    for w in m.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(m)
}

fn load_data(p: &Path, labeled: Option<usize>) -> Result<Dataset> {
    let data = load_manifest(p)?.load_dataset()?;
    match labeled {
        Some(n) => data.with_labeled_target(n),
        None => Ok(data),
    }
}

fn base_config(path: Option<&Path>, iterations: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| Error::io(p, e))
}

fn read_cubes(paths: &[PathBuf]) -> Result<Vec<SpectralCube>> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("cube list"));
    }
    paths.iter().map(|p| read_cube(p)).collect()
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let counts: Counts = a.counts.parse()?;
    let m = build_manifest_sized(&a.out, counts, a.seed, a.size)?;
    for w in m.warnings() {
        eprintln!("warning: {w}");
    }
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_density(a: &DensityArgs) -> Result<()> {
    let cubes = match &a.manifest {
        Some(m) => load_data(m, None)?.labeled_target.into_iter().map(|(_, c)| c).collect(),
        None => read_cubes(&a.cubes)?,
    };
    let part = partition_from_wavelengths(cubes[0].wavelengths())?;
    let d = dataset_density(&cubes, &part, SAM_EPS)?;
    let r = masking_ratios(&d, a.r_min, a.r_max)?;
    println!("region,density,ratio");
    println!("red,{},{}", d.red, r.red);
    println!("green,{},{}", d.green, r.green);
    println!("blue,{},{}", d.blue, r.blue);
    Ok(())
}

fn cmd_endmembers(a: &EndmemberArgs) -> Result<()> {
    let cubes = match &a.manifest {
        Some(m) => {
            let data = load_data(m, None)?;
            data.source
                .into_iter()
                .chain(data.labeled_target)
                .map(|(_, c)| c)
                .collect()
        }
        None => read_cubes(&a.cubes)?,
    };
    let bank = init_bank(&cubes, a.k, a.n_sample, 0.9, a.seed)?;
    let mut out = cubes[0]
        .wavelengths()
        .as_slice()
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in bank.endmembers().iter_rows() {
        out.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    write_file(&a.out, out)
}

fn parse_ratios(s: &str) -> Result<MaskRatios> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidValue(format!("ratios {s:?}: {e}")))?;
    match v[..] {
        [red, green, blue] => Ok(MaskRatios { red, green, blue }),
        _ => Err(Error::InvalidValue(format!("ratios {s:?} must have three entries"))),
    }
}

fn cmd_mask_preview(a: &MaskPreviewArgs) -> Result<()> {
    let ratios = match (&a.ratios, &a.manifest) {
        (Some(r), _) => parse_ratios(r)?,
        (None, Some(m)) => {
            let data = load_data(m, None)?;
            masking_ratios(&report::target_density(&data)?, a.r_min, a.r_max)?
        }
        (None, None) => MaskRatios::uniform(0.5 * (a.r_min + a.r_max)),
    };
    let plan = generate_mask(a.height, a.width, &ratios, a.block_size, a.seed)?;
    let mut bytes = format!("P5\n{} {}\n255\n", a.width, 3 * a.height).into_bytes();
    for ch in 0..3 {
        bytes.extend(plan.pixels[ch].iter().map(|&m| if m == 1 { 0u8 } else { 255 }));
    }
    write_file(&a.out, bytes)?;
    println!("channel,ratio,masked_blocks,total_blocks");
    for (ch, (name, r)) in ["red", "green", "blue"].iter().zip(ratios.as_rgb()).enumerate() {
        println!("{name},{r},{},{}", plan.masked_blocks(ch), plan.total_blocks());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(a.common.config.as_deref(), a.common.iterations)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.sdm {
        cfg.enable_sdm = s.enabled();
    }
    if let Some(s) = a.sera {
        cfg.enable_sera = s.enabled();
    }
    let data = load_data(&a.common.manifest, a.common.labeled_target)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), cfg.to_text())?;
    if cfg.iterations == 0 {
        let state = TrainState::init(&cfg, &data)?;
        return save_checkpoint(&a.out.join("checkpoint.spad"), eval_params(&state, &cfg));
    }
    let out = train_loop(&cfg, &data)?;
    write_file(&a.out.join("metrics.csv"), metrics_csv(&out.log))?;
    save_checkpoint(&a.out.join("checkpoint.spad"), eval_params(&out.state, &cfg))?;
    save_checkpoint(&a.out.join("student.spad"), &out.state.student)?;
    save_checkpoint(&a.out.join("teacher.spad"), &out.state.teacher)?;
    if let Some((it, r)) = out.history.last() {
        eprintln!("iteration {it}: ssim {:.4} sam {:.4} psnr {:.2}", r.ssim, r.sam, r.psnr);
    }
    Ok(())
}

fn write_error_maps(dir: &Path, prefix: &str, pred: &SpectralCube, gt: &SpectralCube) -> Result<()> {
    for kind in [ErrorKind::Sam, ErrorKind::L1] {
        let map = error_map(pred, gt, kind)?;
        map.write_pgm(&dir.join(format!("{prefix}_{}.pgm", kind.name())))?;
        map.write_csv(&dir.join(format!("{prefix}_{}.csv", kind.name())))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = base_config(a.config.as_deref(), None)?;
    let data = load_data(&a.manifest, a.labeled_target)?;
    let labeled = data.labeled_target.len();
    create_dir(&a.out)?;
    let mut report = RunReport::default();
    if a.oracle {
        let per_pair = data
            .validation
            .iter()
            .enumerate()
            .map(|(i, (_, gt))| {
                write_error_maps(&a.out, &format!("oracle_val{i:03}"), gt, gt)?;
                metric_report(gt, gt)
            })
            .collect::<Result<Vec<_>>>()?;
        report.add("oracle", labeled, &[crate::trainer::mean_report(&per_pair)])?;
    }
    if !a.checkpoint.is_empty() {
        let mut runs: Vec<MetricReport> = Vec::new();
        for (k, path) in a.checkpoint.iter().enumerate() {
            let params = load_checkpoint(path)?;
            if k == 0 {
                for (i, (rgb, gt)) in data.validation.iter().enumerate() {
                    let crop = cfg.crop.min(rgb.height()).min(rgb.width());
                    let pred = sliding_window_predict(&params, rgb, crop, cfg.stride.min(crop), gt.wavelengths())?;
                    write_error_maps(&a.out, &format!("{}_val{i:03}", a.method), &pred, gt)?;
                }
            }
            runs.push(evaluate(&params, &data.validation, &cfg)?);
        }
        report.add(&a.method, labeled, &runs)?;
    }
    let csv = report.to_csv();
    write_file(&a.out.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn seed_list(start: u64, n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::InvalidValue("--seeds must be at least 1".into()));
    }
    Ok((start..start + n).collect())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = base_config(a.common.config.as_deref(), a.common.iterations)?;
    let data = load_data(&a.common.manifest, a.common.labeled_target)?;
    let rates = a.rates.clone().unwrap_or_else(|| SWEEP_RATES.to_vec());
    if let Some(r) = rates.iter().find(|r| **r > 100) {
        return Err(Error::InvalidRange(format!("rate {r}% above 100")));
    }
    let rows = run_sweep(&cfg, &data, &seed_list(a.seed, a.seeds)?, &rates)?;
    create_dir(&a.out)?;
    let csv = sweep_csv(&rows);
    write_file(&a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = base_config(a.common.config.as_deref(), a.common.iterations)?;
    let data = load_data(&a.common.manifest, a.common.labeled_target)?;
    let runs = run_ablation(&cfg, &data, &seed_list(a.seed, a.seeds)?)?;
    create_dir(&a.out)?;
    let mut per_seed = String::from("method,seed,ssim,sam,psnr,l1\n");
    for r in &runs {
        let _ = writeln!(
            per_seed,
            "{},{},{},{},{},{}",
            r.method, r.seed, r.report.ssim, r.report.sam, r.report.psnr, r.report.l1
        );
    }
    write_file(&a.out.join("ablation_runs.csv"), per_seed)?;
    let csv = ablation_report(&runs, data.labeled_target.len())?.to_csv();
    write_file(&a.out.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Density(a) => cmd_density(a),
        Command::Endmembers(a) => cmd_endmembers(a),
        Command::MaskPreview(a) => cmd_mask_preview(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepMaskrate(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
