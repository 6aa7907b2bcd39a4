//! Dataset manifests: one tab-separated record per sample,
//! `role<TAB>rgb_path<TAB>cube_path_or_dash`, paths relative to the manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hsi::{rgb_from_cube, CameraResponse, RgbImage, SpectralCube, Wavelengths};
use crate::seed::derive_seed;

use super::hsc::{read_cube, read_rgb, write_cube, write_rgb};
use super::{make_domains, synth_cube};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DEFAULT_SIZE: usize = 64;
const DASH: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    LabeledSource,
    LabeledTarget,
    UnlabeledTarget,
    TargetValidation,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::LabeledSource,
        Role::LabeledTarget,
        Role::UnlabeledTarget,
        Role::TargetValidation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::LabeledSource => "labeled_source",
            Role::LabeledTarget => "labeled_target",
            Role::UnlabeledTarget => "unlabeled_target",
            Role::TargetValidation => "target_validation",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Role::LabeledSource => "source",
            Role::LabeledTarget => "target_labeled",
            Role::UnlabeledTarget => "target_unlabeled",
            Role::TargetValidation => "target_val",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown role {s:?}")))
    }
}

/// Sample counts per role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub source: usize,
    pub labeled_target: usize,
    pub unlabeled_target: usize,
    pub validation: usize,
}

impl Counts {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::LabeledSource => self.source,
            Role::LabeledTarget => self.labeled_target,
            Role::UnlabeledTarget => self.unlabeled_target,
            Role::TargetValidation => self.validation,
        }
    }

    pub fn total(&self) -> usize {
        Role::ALL.iter().map(|r| self.get(*r)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for role in Role::ALL {
            if self.get(role) == 0 {
                return Err(Error::InvalidValue(format!("{role} count must be at least 1")));
            }
        }
        Ok(())
    }
}

impl FromStr for Counts {
    type Err = Error;

    /// `source,labeled_target,unlabeled_target,validation`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidValue(format!("counts {s:?}: {e}")))?;
        match parts[..] {
            [source, labeled_target, unlabeled_target, validation] => Ok(Self {
                source,
                labeled_target,
                unlabeled_target,
                validation,
            }),
            _ => Err(Error::InvalidValue(format!("counts {s:?} must have four entries"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Role,
    pub rgb: Option<PathBuf>,
    pub cube: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn field(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| DASH.to_string(), |p| p.display().to_string())
}

impl DatasetManifest {
    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    pub fn entries_for(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.role, field(&e.rgb), field(&e.cube)))
            .collect()
    }

    pub fn parse(text: &str, root: &Path, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [role, rgb, cube] = cols[..] else {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected 3 tab-separated fields", i + 1),
                ));
            };
            let role: Role = role
                .parse()
                .map_err(|e: Error| Error::format(origin, format!("line {}: {e}", i + 1)))?;
            let path = |s: &str| (s != DASH).then(|| PathBuf::from(s));
            let entry = ManifestEntry {
                role,
                rgb: path(rgb),
                cube: path(cube),
            };
            let needs_cube = matches!(role, Role::LabeledSource | Role::LabeledTarget | Role::TargetValidation);
            if (needs_cube && entry.cube.is_none()) || (entry.rgb.is_none() && entry.cube.is_none()) {
                return Err(Error::format(
                    origin,
                    format!("line {}: {role} entry lacks required paths", i + 1),
                ));
            }
            entries.push(entry);
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Advisory findings that do not block training.
    pub fn warnings(&self) -> Vec<String> {
        let (lt, ut) = (self.count(Role::LabeledTarget), self.count(Role::UnlabeledTarget));
        let mut out = Vec::new();
        if lt * 10 > ut {
            out.push(format!(
                "{lt} labeled target samples against {ut} unlabeled; few-label settings keep labeled at most a tenth of unlabeled"
            ));
        }
        out
    }

    /// Reads every referenced file. Validation entries without an RGB path are
    /// rendered from their cube with the default camera response.
    pub fn load_dataset(&self) -> Result<Dataset> {
        for role in [
            Role::LabeledSource,
            Role::LabeledTarget,
            Role::UnlabeledTarget,
            Role::TargetValidation,
        ] {
            if self.count(role) == 0 {
                return Err(Error::EmptyInput(role.name()));
            }
        }
        let mut camera: Option<CameraResponse> = None;
        let mut pair = |e: &ManifestEntry| -> Result<(RgbImage, SpectralCube)> {
            let cube = read_cube(&self.resolve(e.cube.as_ref().expect("checked at parse")))?;
            let rgb = match &e.rgb {
                Some(p) => read_rgb(&self.resolve(p))?,
                None => {
                    if camera.as_ref().is_none_or(|c| c.bands() != cube.bands()) {
                        camera = Some(CameraResponse::gaussian(cube.wavelengths())?);
                    }
                    rgb_from_cube(&cube, camera.as_ref().expect("set above"))?
                }
            };
            if (rgb.height(), rgb.width()) != (cube.height(), cube.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "rgb {}x{} vs cube {}x{}",
                    rgb.height(),
                    rgb.width(),
                    cube.height(),
                    cube.width()
                )));
            }
            Ok((rgb, cube))
        };
        let source = self
            .entries_for(Role::LabeledSource)
            .map(&mut pair)
            .collect::<Result<Vec<_>>>()?;
        let labeled_target = self
            .entries_for(Role::LabeledTarget)
            .map(&mut pair)
            .collect::<Result<Vec<_>>>()?;
        let validation = self
            .entries_for(Role::TargetValidation)
            .map(&mut pair)
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = self
            .entries_for(Role::UnlabeledTarget)
            .map(|e| match &e.rgb {
                Some(p) => read_rgb(&self.resolve(p)),
                None => Err(Error::InvalidValue("unlabeled entry without an RGB file".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        let wavelengths = source[0].1.wavelengths().clone();
        let all_cubes = source.iter().chain(&labeled_target).chain(&validation).map(|(_, c)| c);
        if let Some(c) = all_cubes.clone().find(|c| c.wavelengths() != &wavelengths) {
            return Err(Error::DimensionMismatch(format!(
                "cubes disagree on wavelength grid ({} vs {} bands)",
                c.bands(),
                wavelengths.len()
            )));
        }
        Ok(Dataset {
            wavelengths,
            source,
            labeled_target,
            unlabeled,
            validation,
        })
    }
}

/// In-memory training and validation data.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub wavelengths: Wavelengths,
    pub source: Vec<(RgbImage, SpectralCube)>,
    pub labeled_target: Vec<(RgbImage, SpectralCube)>,
    pub unlabeled: Vec<RgbImage>,
    pub validation: Vec<(RgbImage, SpectralCube)>,
}

impl Dataset {
    /// Keeps only the first `n` labeled target pairs.
    pub fn with_labeled_target(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.labeled_target.len() {
            return Err(Error::InvalidValue(format!(
                "requested {n} labeled target samples, manifest has {}",
                self.labeled_target.len()
            )));
        }
        self.labeled_target.truncate(n);
        Ok(self)
    }
}

/// Generates a dataset of `DEFAULT_SIZE` square cubes into `out_dir`.
pub fn build_manifest(out_dir: &Path, counts: Counts, seed: u64) -> Result<DatasetManifest> {
    build_manifest_sized(out_dir, counts, seed, DEFAULT_SIZE)
}

/// Writes every cube plus RGB renderings for the training roles, then the
/// manifest. Unlabeled cubes stay on disk as held-out ground truth but are not
/// referenced; validation RGBs are rendered at load time.
pub fn build_manifest_sized(out_dir: &Path, counts: Counts, seed: u64, size: usize) -> Result<DatasetManifest> {
    counts.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (source, target) = make_domains(seed);
    let camera = CameraResponse::gaussian(&source.wavelengths)?;
    let mut entries = Vec::with_capacity(counts.total());
    for role in Role::ALL {
        let spec = if role == Role::LabeledSource { &source } else { &target };
        for i in 0..counts.get(role) {
            let stem = format!("{}_{i:03}", role.file_stem());
            let cube = synth_cube(spec, size, size, derive_seed(seed, &[role.stream(), i as u64]))?;
            let cube_name = PathBuf::from(format!("{stem}.hsc"));
            write_cube(&out_dir.join(&cube_name), &cube)?;
            let rgb_name = if role == Role::TargetValidation {
                None
            } else {
                let name = PathBuf::from(format!("{stem}.rgb"));
                write_rgb(&out_dir.join(&name), &rgb_from_cube(&cube, &camera)?)?;
                Some(name)
            };
            entries.push(ManifestEntry {
                role,
                rgb: rgb_name,
                cube: (role != Role::UnlabeledTarget).then_some(cube_name),
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
