//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dcam::bench::{run_bench, scaling_ratios, BenchConfig};
use dcam::cam::{
    compute_cam, compute_dcam, dcam_from_mbar, dcam_from_permutations, m_transform, ActivationMap, DcamConfig, MTensor,
};
use dcam::metrics::{classification_accuracy, dr_acc, random_baseline};
use dcam::nn::{build_model, train_with_validation, ArchitectureSpec, EpochRecord, Family, Model, TrainConfig};
use dcam::series::{build_cube, idx, sample_permutations, MultivariateSeries, Permutation};
use dcam::synth::{generate, DatasetType, LabeledDataset, SynthConfig};
use dcam::tensor::Tensor;
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, outcome: &Outcome, seconds: f64) {
    let status = if outcome.pass { "PASS" } else { "FAIL" };
    // Written past the test harness capture so the lines always show.
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {id} [{status}] {name}: {} ({seconds:.1}s)",
        outcome.detail
    )
    .unwrap();
    out.flush().unwrap();
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        ),
    });
    report(id, name, &outcome, start.elapsed().as_secs_f64());
    outcome.pass
}

fn random_series(rng: &mut ChaCha8Rng, dims: usize, len: usize) -> MultivariateSeries {
    MultivariateSeries::new(
        dims,
        len,
        (0..dims * len).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for (i, op) in common::OPS.iter().enumerate() {
        let err = common::check_op(op, 20, 1000 + i as u64);
        if err > worst.1 {
            worst = (op, err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst.1 < 1e-3 && secs < 60.0,
        detail: format!(
            "{} ops x 20 shapes, max rel err {:.2e} ({})",
            common::OPS.len(),
            worst.1,
            worst.0
        ),
    }
}

fn randomise(model: &mut Model, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let t = model.param(&name).unwrap();
        let shape = t.shape().to_vec();
        let data: Vec<f32> = if name.ends_with(".running_var") {
            (0..t.numel()).map(|_| rng.random_range(0.5..2.0)).collect()
        } else if name.ends_with(".running_mean") || name.ends_with(".beta") || name.ends_with("bias") {
            (0..t.numel()).map(|_| rng.random_range(-0.5..0.5)).collect()
        } else if name.ends_with(".gamma") {
            (0..t.numel()).map(|_| rng.random_range(0.5..1.5)).collect()
        } else {
            continue;
        };
        model.set_param(&name, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

fn cam_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let dims = rng.random_range(1..=6);
        let len = rng.random_range(3..=40);
        let layers = rng.random_range(1..=3);
        let filters: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=8)).collect();
        let classes = rng.random_range(2..=4);
        let mut spec = ArchitectureSpec::with_filters(Family::DCnn, &filters, classes);
        spec.kernel_widths = (0..layers).map(|_| rng.random_range(1..=5)).collect();
        let mut model = build_model(&spec, dims, i).unwrap();
        randomise(&mut model, &mut rng);
        let series = random_series(&mut rng, dims, len);
        let perm = sample_permutations(dims, 1, i).remove(0);
        let input = model.encode(&series, Some(&perm)).unwrap();
        let logits = model.forward_logits(&input).unwrap().logits;
        for c in 0..classes {
            let lhs = (logits.data()[c] - model.dense_bias().data()[c]) as f64;
            let rhs = compute_cam(&model, &input, c).unwrap().mean();
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("50 models, max rel err {worst:.2e}"),
    }
}

fn all_permutations(dims: usize) -> Vec<Permutation> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Permutation>) {
        if rest.is_empty() {
            out.push(Permutation::new(prefix.clone()).unwrap());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..dims).collect(), &mut out);
    out
}

fn sorted_rows(rows: impl Iterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut v: Vec<Vec<f64>> = rows.collect();
    v.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

fn reindexing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for dims in 1..=8 {
        let len = 3;
        let perms = if dims <= 5 {
            all_permutations(dims)
        } else {
            sample_permutations(dims, 200, dims as u64)
        };
        let series = MultivariateSeries::new(
            dims,
            len,
            (0..dims * len)
                .map(|i| (i / len) as f64 * 10.0 + (i % len) as f64)
                .collect(),
        )
        .unwrap();
        for perm in &perms {
            let cube = build_cube(&series, perm).unwrap();
            let order = perm.as_slice();
            for row in 0..dims {
                for col in 0..dims {
                    if cube.dimension_at(row, col) != order[(col + dims - 1 - row) % dims] {
                        failures.push(format!("D={dims} {order:?} cell ({row},{col})"));
                    }
                }
            }
            for dim in 0..dims {
                for pos in 0..dims {
                    checked += 1;
                    let row = idx(dim, pos, perm, dims).unwrap();
                    let holders = (0..dims).filter(|&r| cube.dimension_at(r, pos) == dim).count();
                    if cube.dimension_at(row, pos) != dim || cube.cell(row, pos) != series.row(dim) || holders != 1 {
                        failures.push(format!("D={dims} {order:?} dim {dim} pos {pos}"));
                    }
                }
            }
            let cam = ActivationMap {
                class_id: 0,
                rows: dims,
                len,
                values: (0..dims * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let m = m_transform(&cam, perm).unwrap();
            let cam_rows = sorted_rows((0..dims).map(|r| cam.row(r).to_vec()));
            for pos in 0..dims {
                if sorted_rows((0..dims).map(|d| m.series(d, pos).to_vec())) != cam_rows {
                    failures.push(format!("D={dims} {order:?} multiset at pos {pos}"));
                }
            }
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{checked} (dim, pos, perm) triples for D <= 8, multiset conserved")
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    }
}

struct Run {
    model: Model,
    data: LabeledDataset,
    /// `(epoch, snapshot)` after every epoch.
    snapshots: Vec<(usize, Model)>,
}

fn train_run(dataset_type: DatasetType, family: Family, seed: u64, keep_snapshots: bool) -> Run {
    let data = generate(&SynthConfig {
        dataset_type,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let spec = ArchitectureSpec::with_filters(family, &[16, 32, 32], 2);
    let mut model = build_model(&spec, data.dims(), seed).unwrap();
    let cfg = TrainConfig {
        max_epochs: 60,
        seed,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::new();
    let mut observer = |m: &Model, r: &EpochRecord| {
        if keep_snapshots {
            snapshots.push((r.epoch, m.clone()));
        }
    };
    train_with_validation(&mut model, &data.train(), &data.val(), &cfg, Some(&mut observer)).unwrap();
    Run { model, data, snapshots }
}

fn dcam_cfg(k: usize) -> DcamConfig {
    DcamConfig {
        k,
        ..DcamConfig::default()
    }
}

/// Returns the Type 1 outcome and the inside-versus-outside mask check.
fn type1_trend() -> (Outcome, Outcome) {
    let mut accs = Vec::new();
    let (mut dr, mut base, mut count) = (0.0, 0.0, 0usize);
    let mut inside_wins = 0usize;
    for seed in SEEDS {
        let run = train_run(DatasetType::Type1, Family::DCnn, seed, false);
        let test = run.data.test();
        accs.push(classification_accuracy(&run.model, &test).unwrap());
        for s in test.iter().filter(|s| s.label() == Some(1)).take(20) {
            if run.model.predict(s).unwrap() != 1 {
                continue;
            }
            let r = compute_dcam(&run.model, s, 1, &dcam_cfg(100)).unwrap();
            let mask = s.mask().unwrap();
            dr += dr_acc(&r.dcam, mask).unwrap();
            base += random_baseline(mask);
            count += 1;
            let mean_where = |want: bool| {
                let v: Vec<f64> = r
                    .dcam
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m == want)
                    .map(|(&x, _)| x)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            if mean_where(true) > mean_where(false) {
                inside_wins += 1;
            }
        }
    }
    let (dr, base) = (dr / count.max(1) as f64, base / count.max(1) as f64);
    let inside = inside_wins as f64 / count.max(1) as f64;
    (
        Outcome {
            pass: accs.iter().all(|&a| a >= 0.90) && count > 0 && dr >= 5.0 * base,
            detail: format!(
                "dCNN test C-acc per seed {accs:?}; dCAM Dr-acc {dr:.3} vs baseline {base:.4} ({:.1}x) over {count} instances",
                dr / base
            ),
        },
        Outcome {
            pass: count > 0 && inside >= 0.8,
            detail: format!("mean dCAM inside the mask beats outside on {inside_wins}/{count} instances"),
        },
    )
}

fn mean_ng_ratio(model: &Model, val: &[MultivariateSeries]) -> f64 {
    val.iter()
        .map(|s| {
            compute_dcam(model, s, s.label().unwrap(), &dcam_cfg(32))
                .unwrap()
                .ng_ratio()
        })
        .sum::<f64>()
        / val.len() as f64
}

/// Returns the Type 2 outcome and the n_g/k checkpoint outcome.
fn type2_separation_and_ng() -> (Outcome, Outcome) {
    let mut rows = Vec::new();
    let mut sep_pass = true;
    let mut means = (0.0, 0.0);
    let mut ng_pass = true;
    let mut ng_rows = Vec::new();
    for seed in SEEDS {
        let ccnn = train_run(DatasetType::Type2, Family::CCnn, seed, false);
        let c_acc = classification_accuracy(&ccnn.model, &ccnn.data.test()).unwrap();
        let dcnn = train_run(DatasetType::Type2, Family::DCnn, seed, true);
        let d_acc = classification_accuracy(&dcnn.model, &dcnn.data.test()).unwrap();
        sep_pass &= c_acc <= 0.65 && d_acc >= 0.85;
        means.0 += c_acc / SEEDS.len() as f64;
        means.1 += d_acc / SEEDS.len() as f64;
        rows.push(format!("seed {seed}: cCNN {c_acc:.3} dCNN {d_acc:.3}"));

        let val = dcnn.data.val();
        let epochs = dcnn.snapshots.len();
        let mid = epochs.div_ceil(2);
        let mut points = Vec::new();
        for (label, model) in [
            ("epoch 1", &dcnn.snapshots[0].1),
            ("mid", &dcnn.snapshots[mid - 1].1),
            ("final", &dcnn.model),
        ] {
            let acc = classification_accuracy(model, &val).unwrap();
            points.push((label, acc, mean_ng_ratio(model, &val)));
        }
        for a in &points {
            for b in &points {
                if a.1 > b.1 && a.2 < b.2 {
                    ng_pass = false;
                }
            }
        }
        ng_rows.push(format!(
            "seed {seed}: {}",
            points
                .iter()
                .map(|(l, acc, ng)| format!("{l} acc {acc:.3} ng/k {ng:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    (
        Outcome {
            pass: sep_pass,
            detail: format!("{}; mean cCNN {:.3} dCNN {:.3}", rows.join("; "), means.0, means.1),
        },
        Outcome {
            pass: ng_pass,
            detail: ng_rows.join("; "),
        },
    )
}

/// AP as an exact rational: the mean over positives of the precision among
/// all cells scoring at least as high.
fn rational_ap(scores: &[i64], labels: &[bool]) -> Option<Ratio<i64>> {
    let positives = labels.iter().filter(|&&l| l).count() as i64;
    if positives == 0 {
        return None;
    }
    let mut total = Ratio::from_integer(0);
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l) {
        let at_least = scores.iter().filter(|&&s| s >= scores[i]).count() as i64;
        let hits = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= scores[i]).count() as i64;
        total += Ratio::new(hits, at_least);
    }
    Some(total / positives)
}

fn ap_oracle() -> Outcome {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut check = |scores: &[i64], labels: &[bool]| {
        let Some(expected) = rational_ap(scores, labels) else {
            return;
        };
        let as_f64: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let got = dr_acc(&as_f64, labels).unwrap();
        let exact = *expected.numer() as f64 / *expected.denom() as f64;
        worst = worst.max((got - exact).abs());
        checked += 1;
    };
    let labels_of = |bits: usize, m: usize| (0..m).map(|i| bits >> i & 1 == 1).collect::<Vec<bool>>();
    // Every labelling with every score pattern over three levels, up to 6 cells.
    for m in 1..=6 {
        for code in 0..3usize.pow(m as u32) {
            let scores: Vec<i64> = (0..m).map(|i| (code / 3usize.pow(i as u32) % 3) as i64).collect();
            for bits in 1..1usize << m {
                check(&scores, &labels_of(bits, m));
            }
        }
    }
    // Every labelling with every strict ranking, up to 7 cells.
    for m in 1..=7 {
        for perm in all_permutations(m) {
            let scores: Vec<i64> = perm.as_slice().iter().map(|&v| v as i64).collect();
            for bits in 1..1usize << m {
                check(&scores, &labels_of(bits, m));
            }
        }
    }
    // Every labelling of 8 to 12 cells against tie-heavy random scores.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in 8..=12 {
        let patterns: Vec<Vec<i64>> = (0..8)
            .map(|_| {
                let levels = rng.random_range(1..=m as i64);
                (0..m).map(|_| rng.random_range(0..levels)).collect()
            })
            .collect();
        for scores in &patterns {
            for bits in 1..1usize << m {
                check(scores, &labels_of(bits, m));
            }
        }
    }
    let hand = dr_acc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    let hand_ok = (hand - 0.8333333333333334).abs() <= 1e-9;
    Outcome {
        pass: worst <= 1e-12 && hand_ok,
        detail: format!("{checked} patterns, max |diff| {worst:.1e}; hand case {hand:.10}"),
    }
}

fn degenerate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = Vec::new();

    let spec = ArchitectureSpec::with_filters(Family::DCnn, &[4, 4], 2);
    let single = build_model(&spec, 1, 1).unwrap();
    let s1 = random_series(&mut rng, 1, 20);
    let r1 = compute_dcam(&single, &s1, 0, &dcam_cfg(5)).unwrap();
    let d1 = r1.dcam.iter().all(|&v| v == 0.0);
    notes.push(format!("D=1 zero map {d1}"));

    let (dims, len) = (4, 6);
    let mut mbar = MTensor::zeros(dims, len);
    for v in mbar.values.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let constant: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
    for p in 0..dims {
        let start = (2 * dims + p) * len;
        mbar.values[start..start + len].copy_from_slice(&constant);
    }
    let (dcam, _) = dcam_from_mbar(&mbar);
    let flat = dcam[2 * len..3 * len].iter().all(|&v| v == 0.0);
    notes.push(format!("constant slice zero row {flat}"));

    let model = build_model(&ArchitectureSpec::with_filters(Family::DCnn, &[6, 6], 3), 5, 2).unwrap();
    let series = random_series(&mut rng, 5, 24);
    let mut perms = sample_permutations(5, 40, 3);
    let reference = dcam_from_permutations(&model, &series, 1, &perms, 1, false).unwrap();
    let mut invariant = true;
    for workers in [1, 2, 3] {
        perms.shuffle(&mut rng);
        let r = dcam_from_permutations(&model, &series, 1, &perms, workers, false).unwrap();
        invariant &= bits(&r.mbar.values) == bits(&reference.mbar.values) && bits(&r.dcam) == bits(&reference.dcam);
    }
    notes.push(format!("order invariance {invariant}"));

    Outcome {
        pass: d1 && flat && invariant,
        detail: notes.join(", "),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn scaling() -> Outcome {
    let cfg = BenchConfig::default();
    let records = run_bench(&cfg).unwrap();
    let r = scaling_ratios(&records, &cfg).unwrap();
    let linear = |x: f64| (1.6..=2.6).contains(&x);
    Outcome {
        pass: linear(r.k) && linear(r.len) && r.dims > 2.6,
        detail: format!(
            "doubling ratios (median of {}): k {:.2}, n {:.2}, D {}->{} {:.2}",
            cfg.repeats,
            r.k,
            r.len,
            cfg.dims,
            2 * cfg.dims,
            r.dims
        ),
    }
}

fn failed() -> Outcome {
    Outcome {
        pass: false,
        detail: "panicked".into(),
    }
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        run(1, "gradient correctness", gradients),
        run(2, "CAM identity", cam_identity),
        run(3, "re-indexing oracle", reindexing),
    ];
    let start = Instant::now();
    let (type1, contrast) = catch_unwind(type1_trend).unwrap_or_else(|_| (failed(), failed()));
    report(4, "Type 1 trend", &type1, start.elapsed().as_secs_f64());
    results.push(type1.pass);
    let start = Instant::now();
    let (sep, ng) = catch_unwind(type2_separation_and_ng).unwrap_or_else(|_| (failed(), failed()));
    let seconds = start.elapsed().as_secs_f64();
    report(5, "Type 2 separation", &sep, seconds);
    results.push(sep.pass);
    results.push(run(6, "Dr-acc metric oracle", ap_oracle));
    results.push(run(7, "dCAM degenerate invariants", degenerate));
    results.push(run(8, "scaling", scaling));
    report(9, "n_g/k monotonicity", &ng, seconds);
    results.push(ng.pass);
    let failing: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, &p)| !p)
        .map(|(i, _)| i + 1)
        .collect();
    let mut out = std::io::stdout().lock();
    let status = if contrast.pass { "PASS" } else { "FAIL" };
    writeln!(out, "extra [{status}] Type 1 mask contrast: {}", contrast.detail).unwrap();
    assert!(failing.is_empty(), "failed criteria: {failing:?}");
    assert!(contrast.pass, "Type 1 mask contrast failed");
}
