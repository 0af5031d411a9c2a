use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, EpochRecord, Model, BATCHNORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::series::MultivariateSeries;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 1000,
            early_stop_patience: 20,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// ADAM with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor<f32>>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            for (i, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let step = self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = (*w as f64 - step) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

/// Splits item indices by label, keeping `first_fraction` of each class in
/// the first list. Deterministic from `seed`.
pub fn stratified_split(labels: &[usize], first_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let cut = (members.len() as f64 * first_fraction).round() as usize;
        first.extend_from_slice(&members[..cut]);
        second.extend_from_slice(&members[cut..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

fn labels_of(items: &[MultivariateSeries], what: &str) -> Result<Vec<usize>> {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label()
                .ok_or_else(|| Error::Config(format!("{what} instance {i} has no label")))
        })
        .collect()
}

/// Holds out `validation_fraction` of `dataset` (stratified) and trains.
pub fn train(model: &mut Model, dataset: &[MultivariateSeries], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let labels = labels_of(dataset, "training")?;
    let (fit, val) = stratified_split(&labels, 1.0 - cfg.validation_fraction, cfg.seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    train_with_validation(model, &pick(&fit), &pick(&val), cfg, None)
}

type Observer<'a> = Option<&'a mut dyn FnMut(&Model, &EpochRecord)>;

/// Minibatch ADAM on softmax cross-entropy with early stopping on the
/// validation loss. On return `model` holds the best-validation weights and
/// its full training log. `observer` sees the model after every epoch.
pub fn train_with_validation(
    model: &mut Model,
    train_set: &[MultivariateSeries],
    val_set: &[MultivariateSeries],
    cfg: &TrainConfig,
    mut observer: Observer<'_>,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let train_labels = labels_of(train_set, "training")?;
    let val_labels = labels_of(val_set, "validation")?;
    if let Some(&l) = train_labels
        .iter()
        .chain(&val_labels)
        .find(|&&l| l >= model.class_count())
    {
        return Err(Error::Config(format!(
            "label {l} but the model has {} classes",
            model.class_count()
        )));
    }
    let mut distinct = train_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("training set has a single class".into()));
    }

    let encode = |items: &[MultivariateSeries]| -> Result<Vec<Tensor<f32>>> {
        items.iter().map(|s| model.encode(s, None)).collect()
    };
    let train_x = encode(train_set)?;
    let val_x = encode(val_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best = (f64::INFINITY, 0.0, 0usize, model.params().clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<Tensor<f32>> = batch.iter().map(|&i| train_x[i].clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let trace = model.trace(&mut g, Tensor::stack(&inputs)?, true)?;
            let loss = g.softmax_cross_entropy(trace.logits, &targets)?;
            let loss_value = g.value(loss).item()? as f64;
            if !loss_value.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss_value * batch.len() as f64;
            let logits = g.value(trace.logits);
            let k = model.class_count();
            hits += targets
                .iter()
                .enumerate()
                .filter(|(b, &t)| argmax(&logits.data()[b * k..(b + 1) * k]) == t)
                .count();

            let mut grads = g.backward(loss)?;
            let named: BTreeMap<String, Tensor<f32>> = trace
                .params
                .iter()
                .filter_map(|(name, id)| grads.take(*id).map(|t| (name.clone(), t)))
                .collect();
            adam.update(model.params_mut(), &named);
            update_running_stats(model, &g, &trace.norms);
        }

        let (val_loss, val_acc) = evaluate(model, &val_x, &val_labels, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_x.len() as f64,
            train_acc: hits as f64 / train_x.len() as f64,
            val_loss,
            val_acc,
        };
        log.push(record.clone());
        if let Some(obs) = observer.as_mut() {
            obs(model, &record);
        }
        if val_loss < best.0 {
            best = (val_loss, val_acc, epoch, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let epochs_run = log.len();
    *model.params_mut() = best.3;
    model.training_log = log;
    Ok(TrainReport {
        best_epoch: best.2,
        epochs_run,
        best_val_loss: best.0,
        best_val_acc: best.1,
        stopped_early,
    })
}

fn update_running_stats(model: &mut Model, g: &Graph<f32>, norms: &[(String, crate::tensor::NodeId)]) {
    for (prefix, id) in norms {
        let Some((mean, var)) = g.batch_stats(*id) else {
            continue;
        };
        let x = g.value(*id);
        let count = (x.numel() / x.shape()[1]) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let params = model.params_mut();
        let m = BATCHNORM_MOMENTUM;
        if let Some(rm) = params.get_mut(&format!("{prefix}.running_mean")) {
            for (r, &b) in rm.data_mut().iter_mut().zip(mean) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
        if let Some(rv) = params.get_mut(&format!("{prefix}.running_var")) {
            for (r, &b) in rv.data_mut().iter_mut().zip(var) {
                *r = ((1.0 - m) * *r as f64 + m * b * unbias) as f32;
            }
        }
    }
}

/// Mean cross-entropy and accuracy in inference mode.
fn evaluate(model: &Model, inputs: &[Tensor<f32>], labels: &[usize], batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut hits) = (0.0, 0usize);
    let k = model.class_count();
    for (xs, ys) in inputs.chunks(batch).zip(labels.chunks(batch)) {
        let mut g = Graph::new();
        let trace = model.trace(&mut g, Tensor::stack(xs)?, false)?;
        let l = g.softmax_cross_entropy(trace.logits, ys)?;
        loss += g.value(l).item()? as f64 * xs.len() as f64;
        let logits = g.value(trace.logits).data();
        hits += ys
            .iter()
            .enumerate()
            .filter(|(b, &t)| argmax(&logits[b * k..(b + 1) * k]) == t)
            .count();
    }
    Ok((loss / inputs.len() as f64, hits as f64 / inputs.len() as f64))
}

/// `epoch,train_loss,val_loss,val_acc` CSV.
pub fn write_training_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for r in log {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod running_stat_tests {
    use super::*;
    use crate::nn::{build_model, ArchitectureSpec, Family};

    #[test]
    fn converged_running_stats_reproduce_batch_mode() {
        for family in [Family::DCnn, Family::DResNet, Family::Cnn, Family::CCnn] {
            let mut model = build_model(&ArchitectureSpec::with_filters(family, &[5, 6], 2), 3, 4).unwrap();
            let xs: Vec<Tensor<f32>> = (0..6)
                .map(|b| {
                    let s = MultivariateSeries::new(
                        3,
                        20,
                        (0..60)
                            .map(|i| ((i * (b + 3)) as f64 * 0.37).sin() * 2.0 + b as f64)
                            .collect(),
                    )
                    .unwrap();
                    model.encode(&s, None).unwrap()
                })
                .collect();
            let batch = Tensor::stack(&xs).unwrap();
            let train_logits = {
                let mut g = Graph::new();
                let t = model.trace(&mut g, batch.clone(), true).unwrap();
                for _ in 0..400 {
                    update_running_stats(&mut model, &g, &t.norms);
                }
                g.value(t.logits).clone()
            };
            let mut g = Graph::new();
            let t = model.trace(&mut g, batch, false).unwrap();
            let eval_logits = g.value(t.logits);
            for (a, b) in train_logits.data().iter().zip(eval_logits.data()) {
                assert!((a - b).abs() < 1e-2 * (1.0 + a.abs()), "{family}: {a} vs {b}");
            }
        }
    }
}
