use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dcam::bench::{run_bench, scaling_ratios, write_bench_csv, BenchConfig};
use dcam::cam::{compute_ccam, compute_dcam, compute_series_cam, min_max_normalize, write_ppm, DcamConfig};
use dcam::metrics::{
    broadcast_rows, classification_accuracy, pr_curve, random_baseline, ExplanationReport, InstanceScore,
};
use dcam::nn::{
    build_model, load_model, save_model, train_with_validation, write_training_log, ArchitectureSpec, Family,
    TrainConfig, TrainReport,
};
use dcam::series::{load_series_csv, save_grid_csv, MultivariateSeries};
use dcam::synth::{export_dataset, generate, import_dataset, SynthConfig};

use crate::output::Staged;
use crate::{BenchArgs, EvalArgs, ExplainArgs, GenDataArgs, TrainArgs};

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .with_context(|| format!("--{name} is required (flag or config file)"))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(args.common.config.as_deref())?;
    if let Some(t) = args.dataset_type {
        cfg.dataset_type = t.parse()?;
    }
    set(&mut cfg.dims, args.dims);
    set(&mut cfg.len, args.len);
    set(&mut cfg.instances_per_class, args.instances_per_class);
    set(&mut cfg.test_instances_per_class, args.test_instances_per_class);
    set(&mut cfg.pattern_length, args.pattern_length);
    set(&mut cfg.pattern_scale, args.pattern_scale);
    set(&mut cfg.injected_dimension_count, args.injected_dims);
    if args.class0_injected.is_some() {
        cfg.class0_injected_count = args.class0_injected;
    }
    set(&mut cfg.noise_scale, args.noise_scale);
    set(&mut cfg.train_fraction, args.train_fraction);
    set(&mut cfg.seed, args.seed);

    let out = Staged::new(&args.common.out)?;
    let data = generate(&cfg)?;
    export_dataset(&data, out.dir())?;
    out.write_json("config.json", &cfg)?;
    let dir = out.commit()?;
    eprintln!(
        "wrote {}: D={} n={} class sizes {:?} mask prevalence {:.4} (train {}, val {}, test {})",
        dir.display(),
        data.dims(),
        data.len(),
        data.class_sizes(),
        data.mask_prevalence(),
        data.splits.train.len(),
        data.splits.val.len(),
        data.splits.test.len()
    );
    Ok(())
}

fn default_arch() -> Family {
    Family::DCnn
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_arch")]
    pub arch: Family,
    /// Overrides the architecture's default filter counts.
    pub filters: Option<Vec<usize>>,
    pub kernel_widths: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub batchnorm: bool,
    pub training: TrainConfig,
    pub resume: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            dataset: None,
            arch: default_arch(),
            filters: None,
            kernel_widths: None,
            batchnorm: true,
            training: TrainConfig::default(),
            resume: None,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    #[serde(flatten)]
    report: TrainReport,
    train_acc: f64,
    val_acc: f64,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainRun = load_config(args.common.config.as_deref())?;
    if args.dataset.is_some() {
        cfg.dataset = args.dataset;
    }
    if let Some(a) = args.arch {
        cfg.arch = a.parse()?;
    }
    if args.filters.is_some() {
        cfg.filters = args.filters;
    }
    if args.kernel_widths.is_some() {
        cfg.kernel_widths = args.kernel_widths;
    }
    if args.no_batchnorm {
        cfg.batchnorm = false;
    }
    set(&mut cfg.training.learning_rate, args.lr);
    set(&mut cfg.training.batch_size, args.batch_size);
    set(&mut cfg.training.max_epochs, args.epochs);
    set(&mut cfg.training.early_stop_patience, args.patience);
    set(&mut cfg.training.seed, args.seed);
    if args.resume.is_some() {
        cfg.resume = args.resume;
    }
    cfg.training.validate()?;
    let out = Staged::new(&args.common.out)?;

    let data = import_dataset(required(&cfg.dataset, "dataset")?)?;
    let mut model = match &cfg.resume {
        Some(path) => {
            let model = load_model(path)?;
            if model.family() != cfg.arch || model.dims() != data.dims() {
                bail!(
                    "{} holds a {} model for {} dimensions, expected {} for {}",
                    path.display(),
                    model.family(),
                    model.dims(),
                    cfg.arch,
                    data.dims()
                );
            }
            model
        }
        None => {
            let mut spec = ArchitectureSpec::defaults(cfg.arch, data.class_labels.len());
            if let Some(f) = &cfg.filters {
                spec.conv_filters = f.clone();
                if cfg.arch != Family::DResNet && cfg.kernel_widths.is_none() {
                    spec.kernel_widths = vec![3; f.len()];
                }
            }
            if let Some(k) = &cfg.kernel_widths {
                spec.kernel_widths = k.clone();
            }
            spec.use_batchnorm = cfg.batchnorm;
            let mut model = build_model(&spec, data.dims(), cfg.training.seed)?;
            model.set_class_labels(data.class_labels.clone())?;
            model
        }
    };

    let (train_set, val_set) = (data.train(), data.val());
    let report = train_with_validation(
        &mut model,
        &train_set,
        &val_set,
        &cfg.training,
        Some(&mut |_: &_, r: &dcam::nn::EpochRecord| {
            eprintln!(
                "epoch {:>4}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }),
    )?;
    let summary = TrainSummary {
        train_acc: classification_accuracy(&model, &train_set)?,
        val_acc: classification_accuracy(&model, &val_set)?,
        report,
    };

    save_model(&model, &out.path("model.bin"))?;
    write_training_log(&model.training_log, &out.path("training_log.csv"))?;
    out.write_json("train_report.json", &summary)?;
    out.write_json("config.json", &cfg)?;
    let dir = out.commit()?;
    eprintln!(
        "best epoch {} of {}: train C-acc {:.3}, val C-acc {:.3}; wrote {}",
        summary.report.best_epoch,
        summary.report.epochs_run,
        summary.train_acc,
        summary.val_acc,
        dir.display()
    );
    Ok(())
}

fn default_cell_height() -> usize {
    8
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainRun {
    pub model: Option<PathBuf>,
    pub series: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index: Option<usize>,
    pub class: Option<usize>,
    pub dcam: DcamConfig,
    pub normalize: bool,
    #[serde(default = "default_cell_height")]
    pub cell_height: usize,
}

impl Default for ExplainRun {
    fn default() -> Self {
        ExplainRun {
            model: None,
            series: None,
            dataset: None,
            index: None,
            class: None,
            dcam: DcamConfig::default(),
            normalize: false,
            cell_height: default_cell_height(),
        }
    }
}

#[derive(Serialize)]
struct ExplainSidecar {
    class_id: usize,
    class_label: String,
    predicted: usize,
    dims: usize,
    len: usize,
    k: usize,
    n_g: usize,
    ng_ratio: f64,
    contributing: usize,
    seed: u64,
    normalized: bool,
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let mut cfg: ExplainRun = load_config(args.common.config.as_deref())?;
    if args.model.is_some() {
        cfg.model = args.model;
    }
    if args.series.is_some() {
        cfg.series = args.series;
        cfg.dataset = None;
    }
    if args.dataset.is_some() {
        cfg.dataset = args.dataset;
        cfg.series = None;
    }
    if args.index.is_some() {
        cfg.index = args.index;
    }
    if args.class.is_some() {
        cfg.class = args.class;
    }
    set(&mut cfg.dcam.k, args.k);
    set(&mut cfg.dcam.seed, args.seed);
    set(&mut cfg.dcam.workers, args.workers);
    cfg.dcam.only_correct |= args.only_correct;
    cfg.normalize |= args.normalize;
    set(&mut cfg.cell_height, args.cell_height);
    let out = Staged::new(&args.common.out)?;

    let model = load_model(required(&cfg.model, "model")?)?;
    let series = load_instance(&cfg)?;
    let predicted = model.predict(&series)?;
    let class_id = cfg.class.unwrap_or(predicted);
    if series.dims() == 1 {
        eprintln!("warning: the series has one dimension, so every dCAM value is zero");
    }
    let result = compute_dcam(&model, &series, class_id, &cfg.dcam)?;
    eprintln!("n_g/k = {}/{} = {:.3}", result.correct, result.k, result.ng_ratio());

    let values = if cfg.normalize {
        min_max_normalize(&result.dcam)
    } else {
        result.dcam.clone()
    };
    save_grid_csv(&values, result.dims, result.len, &out.path("dcam.csv"))?;
    write_ppm(
        &result.dcam,
        result.dims,
        result.len,
        cfg.cell_height,
        &out.path("dcam.ppm"),
    )?;
    out.write_json(
        "dcam.json",
        &ExplainSidecar {
            class_id,
            class_label: model.class_labels().get(class_id).cloned().unwrap_or_default(),
            predicted,
            dims: result.dims,
            len: result.len,
            k: result.k,
            n_g: result.correct,
            ng_ratio: result.ng_ratio(),
            contributing: result.contributing,
            seed: cfg.dcam.seed,
            normalized: cfg.normalize,
        },
    )?;
    out.write_json("config.json", &cfg)?;
    let dir = out.commit()?;
    eprintln!("class {class_id} (predicted {predicted}); wrote {}", dir.display());
    Ok(())
}

fn load_instance(cfg: &ExplainRun) -> Result<MultivariateSeries> {
    match (&cfg.series, &cfg.dataset) {
        (Some(path), _) => Ok(load_series_csv(path)?),
        (None, Some(dir)) => {
            let index = cfg.index.context("--index is required with --dataset")?;
            let data = import_dataset(dir)?;
            data.series
                .get(index)
                .cloned()
                .with_context(|| format!("index {index} out of range for {} instances", data.series.len()))
        }
        (None, None) => bail!("give either --series or --dataset with --index"),
    }
}

fn default_method() -> String {
    "dcam".into()
}

fn default_class() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_class")]
    pub class: usize,
    pub dcam: DcamConfig,
    pub limit: Option<usize>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            model: None,
            dataset: None,
            method: default_method(),
            class: default_class(),
            dcam: DcamConfig::default(),
            limit: None,
        }
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg: EvalRun = load_config(args.common.config.as_deref())?;
    if args.model.is_some() {
        cfg.model = args.model;
    }
    if args.dataset.is_some() {
        cfg.dataset = args.dataset;
    }
    set(&mut cfg.method, args.method.map(|m| m.to_ascii_lowercase()));
    set(&mut cfg.class, args.class);
    set(&mut cfg.dcam.k, args.k);
    set(&mut cfg.dcam.seed, args.seed);
    set(&mut cfg.dcam.workers, args.workers);
    if args.limit.is_some() {
        cfg.limit = args.limit;
    }
    if !matches!(cfg.method.as_str(), "cam" | "ccam" | "dcam") {
        bail!("unknown method {:?} (expected cam, ccam or dcam)", cfg.method);
    }
    let out = Staged::new(&args.common.out)?;

    let model = load_model(required(&cfg.model, "model")?)?;
    let data = import_dataset(required(&cfg.dataset, "dataset")?)?;
    let test = data.test();
    if test.is_empty() {
        bail!("the dataset has no test split");
    }
    let c_acc = classification_accuracy(&model, &test)?;

    fs::create_dir(out.path("pr"))?;
    let mut scores = Vec::new();
    let chosen = data
        .splits
        .test
        .iter()
        .filter(|&&i| data.series[i].label() == Some(cfg.class))
        .take(cfg.limit.unwrap_or(usize::MAX));
    for &index in chosen {
        let s = &data.series[index];
        let mask = s.mask().with_context(|| format!("test instance {index} has no mask"))?;
        let (map, ng_ratio) = match cfg.method.as_str() {
            "cam" => (univariate_cam(&model, s, cfg.class)?, None),
            "ccam" => (compute_ccam(&model, s, cfg.class)?.values, None),
            _ => {
                let r = compute_dcam(&model, s, cfg.class, &cfg.dcam)?;
                (r.dcam.clone(), Some(r.ng_ratio()))
            }
        };
        let curve = pr_curve(&map, mask)?;
        curve.write_csv(&out.path(&format!("pr/instance_{index:05}.csv")))?;
        scores.push(InstanceScore {
            index,
            dr_acc: curve.average_precision,
            random_baseline: random_baseline(mask),
            ng_ratio,
        });
    }
    if scores.is_empty() {
        bail!("no test instances of class {}", cfg.class);
    }
    let report = ExplanationReport::new(&cfg.method, c_acc, scores);
    report.write_json(&out.path("report.json"))?;
    out.write_json("config.json", &cfg)?;
    let dir = out.commit()?;
    eprintln!(
        "{}: C-acc {:.3}, Dr-acc {:.3} over {} instances (random {:.4}); wrote {}",
        report.method,
        report.c_acc,
        report.mean_dr_acc,
        report.instances.len(),
        report.random_baseline,
        dir.display()
    );
    if let Some(ng) = report.ng_ratio {
        eprintln!("n_g/k median {:.3} (min {:.3}, max {:.3})", ng.median, ng.min, ng.max);
    }
    Ok(())
}

/// Per-timestamp CAM averaged over rows and repeated on every dimension.
fn univariate_cam(model: &dcam::nn::Model, s: &MultivariateSeries, class: usize) -> Result<Vec<f64>> {
    let cam = compute_series_cam(model, s, class)?;
    let row: Vec<f64> = (0..cam.len)
        .map(|t| (0..cam.rows).map(|r| cam.row(r)[t]).sum::<f64>() / cam.rows as f64)
        .collect();
    Ok(broadcast_rows(&row, s.dims()))
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = load_config(args.common.config.as_deref())?;
    set(&mut cfg.dims, args.dims);
    set(&mut cfg.len, args.len);
    set(&mut cfg.k, args.k);
    set(&mut cfg.doublings, args.doublings);
    set(&mut cfg.repeats, args.repeats);
    set(&mut cfg.filters, args.filters);
    set(&mut cfg.kernel_width, args.kernel_width);
    set(&mut cfg.seed, args.seed);

    let out = Staged::new(&args.common.out)?;
    let records = run_bench(&cfg)?;
    write_bench_csv(&records, &out.path("bench.csv"))?;
    let ratios = scaling_ratios(&records, &cfg);
    if let Some(r) = ratios {
        out.write_json("ratios.json", &r)?;
    }
    out.write_json("config.json", &cfg)?;
    let dir = out.commit()?;
    if let Some(r) = ratios {
        eprintln!("doubling ratios: D {:.2}, n {:.2}, k {:.2}", r.dims, r.len, r.k);
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}
