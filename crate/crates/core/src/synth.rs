//! Two-class synthetic benchmarks with ground-truth masks.
//!
//! Type 1 separates classes by the presence of a pattern in a few
//! dimensions. Type 2 injects patterns in both classes and separates them
//! only by whether the injections share a start position.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::stratified_split;
use crate::series::{load_series_csv, mask_path, save_series_csv, MultivariateSeries};

const CROSSFADE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetType {
    Type1,
    Type2,
}

impl std::str::FromStr for DatasetType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "type1" | "1" => Ok(DatasetType::Type1),
            "type2" | "2" => Ok(DatasetType::Type2),
            _ => Err(Error::Config(format!("unknown dataset type {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: usize,
    pub len: usize,
    /// Train and validation instances per class.
    pub instances_per_class: usize,
    /// Held-out test instances per class.
    pub test_instances_per_class: usize,
    pub pattern_length: usize,
    /// Pattern amplitude relative to the background amplitude.
    pub pattern_scale: f64,
    pub injected_dimension_count: usize,
    /// Type 2 class-0 injections; defaults to `injected_dimension_count`.
    pub class0_injected_count: Option<usize>,
    pub noise_scale: f64,
    pub dataset_type: DatasetType,
    /// Fraction of the non-test pool used for training; the rest validates.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: 10,
            len: 400,
            instances_per_class: 60,
            test_instances_per_class: 20,
            pattern_length: 64,
            pattern_scale: 4.0,
            injected_dimension_count: 2,
            class0_injected_count: None,
            noise_scale: 0.1,
            dataset_type: DatasetType::Type1,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn class0_count(&self) -> usize {
        self.class0_injected_count.unwrap_or(self.injected_dimension_count)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims == 0 || self.len == 0 {
            return bad("dims and len must be positive".into());
        }
        if self.pattern_length >= self.len {
            return bad(format!(
                "pattern_length {} must be shorter than the series length {}",
                self.pattern_length, self.len
            ));
        }
        if self.pattern_length < 2 * CROSSFADE + 1 {
            return bad(format!("pattern_length must be at least {}", 2 * CROSSFADE + 1));
        }
        if self.injected_dimension_count == 0 || self.injected_dimension_count > self.dims {
            return bad(format!(
                "injected_dimension_count must be in 1..={}, got {}",
                self.dims, self.injected_dimension_count
            ));
        }
        if self.instances_per_class == 0 {
            return bad("instances_per_class must be positive".into());
        }
        if !(self.pattern_scale > 0.0 && self.pattern_scale.is_finite()) {
            return bad("pattern_scale must be finite and positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must be in (0, 1]".into());
        }
        if self.dataset_type == DatasetType::Type2 {
            let x = self.class0_count();
            if x == 0 || x > self.dims {
                return bad(format!("class0_injected_count must be in 1..={}", self.dims));
            }
            if x * self.pattern_length > self.len - self.pattern_length + 1 {
                return bad(format!(
                    "{x} separated patterns of length {} do not fit in {}",
                    self.pattern_length, self.len
                ));
            }
        }
        Ok(())
    }

    /// Fraction of positive mask cells in a class-1 instance.
    pub fn mask_prevalence(&self) -> f64 {
        (self.injected_dimension_count * self.pattern_length) as f64 / (self.dims * self.len) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Splits {
    fn check(&self, count: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= count {
                return Err(Error::Config(format!(
                    "split index {i} out of range for {count} instances"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Config(format!("instance {i} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub config: Option<SynthConfig>,
    pub class_labels: Vec<String>,
    pub series: Vec<MultivariateSeries>,
    pub splits: Splits,
}

impl LabeledDataset {
    pub fn dims(&self) -> usize {
        self.series.first().map_or(0, |s| s.dims())
    }

    pub fn len(&self) -> usize {
        self.series.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn pick(&self, indices: &[usize]) -> Vec<MultivariateSeries> {
        indices.iter().map(|&i| self.series[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<MultivariateSeries> {
        self.pick(&self.splits.train)
    }

    pub fn val(&self) -> Vec<MultivariateSeries> {
        self.pick(&self.splits.val)
    }

    pub fn test(&self) -> Vec<MultivariateSeries> {
        self.pick(&self.splits.test)
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_labels.len()];
        for s in &self.series {
            if let Some(l) = s.label() {
                if l < sizes.len() {
                    sizes[l] += 1;
                }
            }
        }
        sizes
    }

    /// Positive cells over all cells of masked instances.
    pub fn mask_prevalence(&self) -> f64 {
        let (pos, total) = self
            .series
            .iter()
            .filter_map(|s| s.mask())
            .fold((0usize, 0usize), |(p, t), m| {
                (p + m.iter().filter(|&&b| b).count(), t + m.len())
            });
        if total == 0 {
            0.0
        } else {
            pos as f64 / total as f64
        }
    }
}

/// Sine of period `max(4, len / 16)` under a mild exponential decay.
fn damped_burst(len: usize) -> Vec<f64> {
    let period = (len as f64 / 16.0).max(4.0);
    (0..len)
        .map(|j| (TAU * j as f64 / period).sin() * (-0.5 * j as f64 / len as f64).exp())
        .collect()
}

/// Unit-variance sum of 2 to 4 slow sinusoids plus white noise.
fn background(rng: &mut ChaCha8Rng, len: usize, noise: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            (
                rng.random_range(0.5..1.5),
                rng.random_range(1.0..6.0) / len as f64,
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let smooth: Vec<f64> = (0..len)
        .map(|t| waves.iter().map(|&(a, f, p)| a * (TAU * f * t as f64 + p).sin()).sum())
        .collect();
    let mean = smooth.iter().sum::<f64>() / len as f64;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
    smooth
        .iter()
        .map(|v| (v - mean) / std + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Replaces `row[start..start + template.len()]` with the template around the
/// window mean, blending the edges linearly. The template is scaled to
/// `scale` times the amplitude of a sinusoid with the row's variance.
fn inject(rng: &mut ChaCha8Rng, row: &mut [f64], start: usize, template: &[f64], scale: f64, noise: f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let amplitude = scale * (2.0 * row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let window = &row[start..start + template.len()];
    let base = window.iter().sum::<f64>() / window.len() as f64;
    let last = template.len() - 1;
    for (j, &shape) in template.iter().enumerate() {
        let pattern = base + amplitude * shape + noise * rng.sample::<f64, _>(StandardNormal);
        let edge = j.min(last - j);
        let w = if edge < CROSSFADE {
            (edge + 1) as f64 / (CROSSFADE + 1) as f64
        } else {
            1.0
        };
        let v = &mut row[start + j];
        *v = (1.0 - w) * *v + w * pattern;
    }
}

/// `count` starts in `0..slots`, each uniformly distributed, with every pair
/// at least `width` apart. Gaps of at least `width` are laid around a circle
/// of `slots` positions and the arrangement is rotated uniformly.
fn spread_starts(rng: &mut ChaCha8Rng, count: usize, slots: usize, width: usize) -> Vec<usize> {
    let slack = slots - count * width;
    let mut cuts: Vec<usize> = (0..count.saturating_sub(1))
        .map(|_| rng.random_range(0..=slack))
        .collect();
    cuts.sort_unstable();
    let offset = rng.random_range(0..slots);
    let mut starts = Vec::with_capacity(count);
    let mut pos = 0;
    for (i, &cut) in cuts.iter().chain(std::iter::once(&slack)).enumerate() {
        starts.push((offset + pos) % slots);
        let prev = if i == 0 { 0 } else { cuts[i - 1] };
        pos += width + cut - prev;
    }
    starts
}

fn instance(rng: &mut ChaCha8Rng, cfg: &SynthConfig, label: usize, template: &[f64]) -> Result<MultivariateSeries> {
    let (dims, len, width) = (cfg.dims, cfg.len, cfg.pattern_length);
    let mut rows: Vec<Vec<f64>> = (0..dims).map(|_| background(rng, len, cfg.noise_scale)).collect();
    let mut mask = vec![false; dims * len];
    let max_start = len - width;

    let (count, starts) = match (cfg.dataset_type, label) {
        (DatasetType::Type1, 0) => (0, Vec::new()),
        (DatasetType::Type1, _) => {
            let c = cfg.injected_dimension_count;
            (c, (0..c).map(|_| rng.random_range(0..=max_start)).collect())
        }
        (DatasetType::Type2, 0) => {
            let c = cfg.class0_count();
            (c, spread_starts(rng, c, max_start + 1, width))
        }
        (DatasetType::Type2, _) => {
            let c = cfg.injected_dimension_count;
            (c, vec![rng.random_range(0..=max_start); c])
        }
    };
    let chosen = sample(rng, dims, count).into_vec();
    for (&d, &start) in chosen.iter().zip(&starts) {
        inject(rng, &mut rows[d], start, template, cfg.pattern_scale, cfg.noise_scale);
        if label == 1 {
            mask[d * len + start..d * len + start + width].fill(true);
        }
    }
    MultivariateSeries::from_rows(&rows)?.with_label(label).with_mask(mask)
}

/// Generates `instances_per_class + test_instances_per_class` instances per
/// class, alternating labels, with the test instances last.
pub fn generate(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = damped_burst(cfg.pattern_length);
    let per_class = cfg.instances_per_class + cfg.test_instances_per_class;
    let mut series = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for label in 0..2 {
            series.push(instance(&mut rng, cfg, label, &template)?);
        }
    }
    let pool = 2 * cfg.instances_per_class;
    let dataset = LabeledDataset {
        config: Some(cfg.clone()),
        class_labels: vec!["0".into(), "1".into()],
        series,
        splits: Splits {
            test: (pool..2 * per_class).collect(),
            ..Splits::default()
        },
    };
    split(&dataset, cfg.train_fraction, cfg.seed)
}

/// Stratified train/validation split of every instance outside the test set.
pub fn split(dataset: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config("train_fraction must be in (0, 1]".into()));
    }
    let test: BTreeSet<usize> = dataset.splits.test.iter().copied().collect();
    let mut pool = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in dataset.series.iter().enumerate() {
        if test.contains(&i) {
            continue;
        }
        pool.push(i);
        labels.push(
            s.label()
                .ok_or_else(|| Error::Config(format!("instance {i} has no label")))?,
        );
    }
    let (train, val) = stratified_split(&labels, train_fraction, seed);
    let mut out = dataset.clone();
    out.splits = Splits {
        train: train.iter().map(|&i| pool[i]).collect(),
        val: val.iter().map(|&i| pool[i]).collect(),
        test: dataset.splits.test.clone(),
        seed,
    };
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    mask_file: Option<String>,
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: Option<SynthConfig>,
    class_labels: Vec<String>,
    dims: usize,
    len: usize,
    instances: Vec<ManifestEntry>,
    splits: Splits,
}

const MANIFEST: &str = "manifest.json";

fn instance_name(i: usize) -> String {
    format!("instance_{i:05}.csv")
}

pub fn export_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut instances = Vec::with_capacity(dataset.series.len());
    for (i, s) in dataset.series.iter().enumerate() {
        let file = instance_name(i);
        let path = dir.join(&file);
        save_series_csv(s, &path)?;
        instances.push(ManifestEntry {
            mask_file: s.mask().map(|_| {
                mask_path(&path)
                    .file_name()
                    .expect("file name")
                    .to_string_lossy()
                    .into_owned()
            }),
            file,
            label: s.label(),
        });
    }
    let manifest = Manifest {
        format_version: 1,
        config: dataset.config.clone(),
        class_labels: dataset.class_labels.clone(),
        dims: dataset.dims(),
        len: dataset.len(),
        instances,
        splits: dataset.splits.clone(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn import_dataset(dir: &Path) -> Result<LabeledDataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let corrupt = |message: String| Error::Corrupt {
        path: mpath.clone(),
        message,
    };

    let on_disk = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("instance_") && n.ends_with(".csv") && !n.ends_with(".mask.csv"))
        .count();
    if on_disk != manifest.instances.len() {
        return Err(corrupt(format!(
            "manifest lists {} instances but the directory holds {on_disk}",
            manifest.instances.len()
        )));
    }

    let mut series = Vec::with_capacity(manifest.instances.len());
    for entry in &manifest.instances {
        let path = dir.join(&entry.file);
        if let Some(mask) = &entry.mask_file {
            let m = dir.join(mask);
            if !m.exists() || m != mask_path(&path) {
                return Err(corrupt(format!("mask file {mask} for {} is missing", entry.file)));
            }
        }
        let mut s = load_series_csv(&path)?;
        if s.dims() != manifest.dims || s.len() != manifest.len {
            return Err(corrupt(format!(
                "{} is {}×{}, manifest says {}×{}",
                entry.file,
                s.dims(),
                s.len(),
                manifest.dims,
                manifest.len
            )));
        }
        if entry.mask_file.is_none() && s.mask().is_some() {
            return Err(corrupt(format!("{} has a mask the manifest does not list", entry.file)));
        }
        s.set_label(entry.label);
        series.push(s);
    }
    manifest
        .splits
        .check(series.len())
        .map_err(|e| corrupt(e.to_string()))?;
    Ok(LabeledDataset {
        config: manifest.config,
        class_labels: manifest.class_labels,
        series,
        splits: manifest.splits,
    })
}
