//! Wall-clock scaling of dCAM in the number of dimensions, the series
//! length and the number of permutations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{compute_dcam, DcamConfig};
use crate::error::{Error, Result};
use crate::nn::{build_model, ArchitectureSpec, Family};
use crate::series::MultivariateSeries;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dims: usize,
    pub len: usize,
    pub k: usize,
    /// Each sweep doubles one of dims, len and k this many times.
    pub doublings: usize,
    pub repeats: usize,
    pub filters: Vec<usize>,
    pub kernel_width: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: 10,
            len: 100,
            k: 64,
            doublings: 1,
            repeats: 5,
            filters: vec![32],
            kernel_width: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sweep: String,
    pub dims: usize,
    pub len: usize,
    pub k: usize,
    pub repeat: usize,
    pub seconds: f64,
}

/// Seconds for one dCAM of an untrained dCNN on a random series.
pub fn time_dcam(cfg: &BenchConfig, dims: usize, len: usize, k: usize) -> Result<f64> {
    let seed = cfg.seed;
    let mut spec = ArchitectureSpec::with_filters(Family::DCnn, &cfg.filters, 2);
    spec.kernel_widths = vec![cfg.kernel_width; cfg.filters.len()];
    let model = build_model(&spec, dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..dims * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let series = MultivariateSeries::new(dims, len, values)?;
    let cfg = DcamConfig {
        k,
        seed,
        workers: 1,
        only_correct: false,
    };
    let start = Instant::now();
    let result = compute_dcam(&model, &series, 0, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(result);
    Ok(seconds)
}

/// Runs the three doubling sweeps from the base point. The base point is
/// measured once per repeat under the sweep name `base`.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.dims == 0
        || cfg.len == 0
        || cfg.k == 0
        || cfg.repeats == 0
        || cfg.kernel_width == 0
        || cfg.filters.is_empty()
    {
        return Err(Error::Config(
            "bench sizes, repeats and filters must be non-empty".into(),
        ));
    }
    let mut points = vec![("base", cfg.dims, cfg.len, cfg.k)];
    for i in 1..=cfg.doublings {
        let f = 1 << i;
        points.push(("dims", cfg.dims * f, cfg.len, cfg.k));
        points.push(("len", cfg.dims, cfg.len * f, cfg.k));
        points.push(("k", cfg.dims, cfg.len, cfg.k * f));
    }
    time_dcam(cfg, cfg.dims, cfg.len, 1)?;
    let mut records = Vec::new();
    for repeat in 0..cfg.repeats {
        for &(sweep, dims, len, k) in &points {
            records.push(BenchRecord {
                sweep: sweep.to_string(),
                dims,
                len,
                k,
                repeat,
                seconds: time_dcam(cfg, dims, len, k)?,
            });
        }
    }
    Ok(records)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median time at `(dims, len, k)` over all records measured there.
pub fn median_seconds(records: &[BenchRecord], dims: usize, len: usize, k: usize) -> Option<f64> {
    let times: Vec<f64> = records
        .iter()
        .filter(|r| r.dims == dims && r.len == len && r.k == k)
        .map(|r| r.seconds)
        .collect();
    (!times.is_empty()).then(|| median(times))
}

/// Median over repeats of the time at one doubled point divided by the base
/// time of the same repeat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRatios {
    pub dims: f64,
    pub len: f64,
    pub k: f64,
}

pub fn scaling_ratios(records: &[BenchRecord], cfg: &BenchConfig) -> Option<ScalingRatios> {
    let ratio = |dims: usize, len: usize, k: usize| {
        let at = |repeat: usize, d: usize, l: usize, kk: usize| {
            records
                .iter()
                .find(|r| r.repeat == repeat && r.dims == d && r.len == l && r.k == kk)
                .map(|r| r.seconds)
        };
        let ratios: Vec<f64> = (0..cfg.repeats)
            .filter_map(|rep| Some(at(rep, dims, len, k)? / at(rep, cfg.dims, cfg.len, cfg.k)?))
            .collect();
        (!ratios.is_empty()).then(|| median(ratios))
    };
    Some(ScalingRatios {
        dims: ratio(2 * cfg.dims, cfg.len, cfg.k)?,
        len: ratio(cfg.dims, 2 * cfg.len, cfg.k)?,
        k: ratio(cfg.dims, cfg.len, 2 * cfg.k)?,
    })
}

pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut out = String::from("sweep,dims,len,k,repeat,seconds\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.sweep, r.dims, r.len, r.k, r.repeat, r.seconds
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
