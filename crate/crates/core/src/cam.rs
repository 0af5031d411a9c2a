//! Class activation maps and the dimension-wise map built from rotation
//! cubes of randomly permuted dimensions.
//!
//! For one permutation the CAM of a cube model is a `D × n` grid indexed by
//! cube row. Re-indexing it by (original dimension, column position) gives a
//! `D × D × n` tensor; averaging those over `k` permutations gives `M̄`.
//! The explanation for dimension `d` at time `t` is the population variance
//! of `M̄[d][·][t]` over positions, times the mean of all `D²` entries of
//! `M̄[·][·][t]`.

use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Family, Model};
use crate::series::{row_for_slot, sample_permutations, MultivariateSeries, Permutation};
use crate::tensor::Tensor;

/// CAM for one class: `rows × len`, one row for univariate CNN maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub class_id: usize,
    pub rows: usize,
    pub len: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.len..(r + 1) * self.len]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Weighted sum of feature maps `(F, H, W)` (or `(1, F, H, W)`) by column
/// `class_id` of the dense weights `(F, K)`.
pub fn cam_from_features(features: &Tensor<f32>, dense_weight: &Tensor<f32>, class_id: usize) -> Result<ActivationMap> {
    let shape = match features.shape() {
        [1, f, h, w] | [f, h, w] => [*f, *h, *w],
        other => {
            return Err(Error::shape(
                "cam",
                format!("features must be (F, H, W), got {other:?}"),
            ))
        }
    };
    let [filters, rows, len] = shape;
    let (wf, classes) = match dense_weight.shape() {
        [f, k] => (*f, *k),
        other => return Err(Error::shape("cam", format!("dense weight {other:?}"))),
    };
    if wf != filters {
        return Err(Error::shape(
            "cam",
            format!("{filters} feature maps but dense weight has {wf} rows"),
        ));
    }
    if class_id >= classes {
        return Err(Error::Config(format!(
            "class {class_id} out of range for {classes} classes"
        )));
    }
    let plane = rows * len;
    let mut values = vec![0.0f64; plane];
    for m in 0..filters {
        let w = dense_weight.data()[m * classes + class_id] as f64;
        if w == 0.0 {
            continue;
        }
        for (v, &a) in values.iter_mut().zip(&features.data()[m * plane..(m + 1) * plane]) {
            *v += w * a as f64;
        }
    }
    Ok(ActivationMap {
        class_id,
        rows,
        len,
        values,
    })
}

/// CAM of `model` on an encoded input `(C, H, n)`.
pub fn compute_cam(model: &Model, input: &Tensor<f32>, class_id: usize) -> Result<ActivationMap> {
    check_class(model, class_id)?;
    let out = model.forward_logits(input)?;
    cam_from_features(&out.features, model.dense_weight(), class_id)
}

/// CAM of `model` on a series (cube families use the identity order).
pub fn compute_series_cam(model: &Model, series: &MultivariateSeries, class_id: usize) -> Result<ActivationMap> {
    compute_cam(model, &model.encode(series, None)?, class_id)
}

/// Per-dimension CAM of a cCNN model.
pub fn compute_ccam(model: &Model, series: &MultivariateSeries, class_id: usize) -> Result<ActivationMap> {
    if model.family() != Family::CCnn {
        return Err(Error::Family {
            family: model.family().to_string(),
            what: "cCAM needs a cCNN model".into(),
        });
    }
    compute_series_cam(model, series, class_id)
}

fn check_class(model: &Model, class_id: usize) -> Result<()> {
    if class_id >= model.class_count() {
        return Err(Error::Config(format!(
            "class {class_id} out of range for {} classes",
            model.class_count()
        )));
    }
    Ok(())
}

/// `(dimension, position, time)` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MTensor {
    pub dims: usize,
    pub len: usize,
    pub values: Vec<f64>,
}

impl MTensor {
    pub fn zeros(dims: usize, len: usize) -> Self {
        MTensor {
            dims,
            len,
            values: vec![0.0; dims * dims * len],
        }
    }

    pub fn series(&self, dim: usize, pos: usize) -> &[f64] {
        let start = (dim * self.dims + pos) * self.len;
        &self.values[start..start + self.len]
    }

    fn series_mut(&mut self, dim: usize, pos: usize) -> &mut [f64] {
        let start = (dim * self.dims + pos) * self.len;
        &mut self.values[start..start + self.len]
    }
}

/// Re-indexes a cube CAM by (original dimension, column position):
/// `out[d][p] = cam.row(idx(d, p))`.
pub fn m_transform(cam: &ActivationMap, perm: &Permutation) -> Result<MTensor> {
    let dims = perm.len();
    if cam.rows != dims {
        return Err(Error::shape(
            "m_transform",
            format!("CAM has {} rows, permutation has {dims} entries", cam.rows),
        ));
    }
    let mut out = MTensor::zeros(dims, cam.len);
    accumulate(&mut out, cam, perm);
    Ok(out)
}

fn accumulate(acc: &mut MTensor, cam: &ActivationMap, perm: &Permutation) {
    let dims = acc.dims;
    for (dim, &slot) in perm.inverse().iter().enumerate() {
        for pos in 0..dims {
            let row = cam.row(row_for_slot(slot, pos, dims));
            for (a, &v) in acc.series_mut(dim, pos).iter_mut().zip(row) {
                *a += v;
            }
        }
    }
}

/// Per-timestamp mean over all `D²` entries.
pub fn mu_series(mbar: &MTensor) -> Vec<f64> {
    let mut mu = vec![0.0; mbar.len];
    for chunk in mbar.values.chunks(mbar.len) {
        for (m, &v) in mu.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    let cells = (mbar.dims * mbar.dims) as f64;
    mu.iter_mut().for_each(|m| *m /= cells);
    mu
}

/// `dcam[d][t] = var_p(M̄[d][p][t]) * mu[t]`, returned with `mu`.
pub fn dcam_from_mbar(mbar: &MTensor) -> (Vec<f64>, Vec<f64>) {
    let (dims, len) = (mbar.dims, mbar.len);
    let mu = mu_series(mbar);
    let mut dcam = vec![0.0; dims * len];
    for d in 0..dims {
        for t in 0..len {
            let mean = (0..dims).map(|p| mbar.series(d, p)[t]).sum::<f64>() / dims as f64;
            let var = (0..dims)
                .map(|p| {
                    let x = mbar.series(d, p)[t] - mean;
                    x * x
                })
                .sum::<f64>()
                / dims as f64;
            dcam[d * len + t] = var * mu[t];
        }
    }
    (dcam, mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcamConfig {
    /// Number of sampled permutations.
    pub k: usize,
    pub seed: u64,
    /// Threads evaluating permutations. Results do not depend on it.
    pub workers: usize,
    /// Average only permutations the model classifies as `class_id`.
    pub only_correct: bool,
}

impl Default for DcamConfig {
    fn default() -> Self {
        DcamConfig {
            k: 100,
            seed: 0,
            workers: 1,
            only_correct: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcamResult {
    pub class_id: usize,
    pub dims: usize,
    pub len: usize,
    /// `dims × len`
    pub dcam: Vec<f64>,
    pub mbar: MTensor,
    pub mu: Vec<f64>,
    /// Permutations evaluated.
    pub k: usize,
    /// Permutations classified as `class_id` (n_g).
    pub correct: usize,
    /// Permutations averaged into `mbar`.
    pub contributing: usize,
}

impl DcamResult {
    pub fn ng_ratio(&self) -> f64 {
        self.correct as f64 / self.k as f64
    }

    pub fn row(&self, dim: usize) -> &[f64] {
        &self.dcam[dim * self.len..(dim + 1) * self.len]
    }
}

/// CAM grid and predicted class for one permutation.
pub fn evaluate_permutation(
    model: &Model,
    series: &MultivariateSeries,
    perm: &Permutation,
    class_id: usize,
) -> Result<(ActivationMap, usize)> {
    let out = model.forward_logits(&model.encode(series, Some(perm))?)?;
    let cam = cam_from_features(&out.features, model.dense_weight(), class_id)?;
    Ok((cam, argmax(out.logits.data())))
}

pub fn compute_dcam(
    model: &Model,
    series: &MultivariateSeries,
    class_id: usize,
    cfg: &DcamConfig,
) -> Result<DcamResult> {
    if cfg.k < 1 {
        return Err(Error::Config("dCAM needs k >= 1 permutations".into()));
    }
    let perms = sample_permutations(series.dims(), cfg.k, cfg.seed);
    dcam_from_permutations(model, series, class_id, &perms, cfg.workers, cfg.only_correct)
}

/// dCAM over an explicit permutation sample. Contributions are merged in
/// sorted permutation order, so the result is bitwise independent of both
/// the sample order and the worker count.
pub fn dcam_from_permutations(
    model: &Model,
    series: &MultivariateSeries,
    class_id: usize,
    perms: &[Permutation],
    workers: usize,
    only_correct: bool,
) -> Result<DcamResult> {
    if !model.family().uses_cube() {
        return Err(Error::Family {
            family: model.family().to_string(),
            what: "dCAM needs a dCNN or dResNet model".into(),
        });
    }
    if perms.is_empty() {
        return Err(Error::Config("dCAM needs k >= 1 permutations".into()));
    }
    check_class(model, class_id)?;
    if series.dims() != model.dims() {
        return Err(Error::shape(
            "dcam",
            format!(
                "model expects {} dimensions, series has {}",
                model.dims(),
                series.dims()
            ),
        ));
    }

    let evaluated = evaluate_all(model, series, perms, class_id, workers.max(1))?;

    let mut order: Vec<usize> = (0..perms.len()).collect();
    order.sort_by(|&a, &b| perms[a].cmp(&perms[b]));
    let (dims, len) = (series.dims(), series.len());
    let mut mbar = MTensor::zeros(dims, len);
    let mut contributing = 0;
    for &i in &order {
        let (cam, predicted) = &evaluated[i];
        if only_correct && *predicted != class_id {
            continue;
        }
        accumulate(&mut mbar, cam, &perms[i]);
        contributing += 1;
    }
    if contributing > 0 {
        let scale = 1.0 / contributing as f64;
        mbar.values.iter_mut().for_each(|v| *v *= scale);
    }
    let (dcam, mu) = dcam_from_mbar(&mbar);
    Ok(DcamResult {
        class_id,
        dims,
        len,
        dcam,
        mbar,
        mu,
        k: perms.len(),
        correct: evaluated.iter().filter(|(_, p)| *p == class_id).count(),
        contributing,
    })
}

fn evaluate_all(
    model: &Model,
    series: &MultivariateSeries,
    perms: &[Permutation],
    class_id: usize,
    workers: usize,
) -> Result<Vec<(ActivationMap, usize)>> {
    if workers == 1 || perms.len() == 1 {
        return perms
            .iter()
            .map(|p| evaluate_permutation(model, series, p, class_id))
            .collect();
    }
    let chunk = perms.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = perms
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|p| evaluate_permutation(model, series, p, class_id))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut all = Vec::with_capacity(perms.len());
        for h in handles {
            all.extend(h.join().expect("dCAM worker panicked")?);
        }
        Ok(all)
    })
}

/// Writes a `rows × cols` map as a binary PPM, one pixel per cell stretched
/// to `cell_height` pixels per row. Colours run linearly from blue (min) to
/// yellow (max); a constant map is drawn at the minimum colour.
pub fn write_ppm(values: &[f64], rows: usize, cols: usize, cell_height: usize, path: &Path) -> Result<()> {
    let cell_height = cell_height.max(1);
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let mut out = format!("P6\n{} {}\n255\n", cols, rows * cell_height).into_bytes();
    for r in 0..rows {
        let mut line = Vec::with_capacity(cols * 3);
        for &v in &values[r * cols..(r + 1) * cols] {
            let x = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let hot = (255.0 * x).round() as u8;
            line.extend_from_slice(&[hot, hot, 255 - hot]);
        }
        for _ in 0..cell_height {
            out.extend_from_slice(&line);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}
