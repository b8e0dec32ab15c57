//! SGD training, softmax cross-entropy, evaluation metrics and the
//! frozen-backbone transfer-learning flow.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::PreparedDataset;
use crate::error::{Error, Result};
use crate::init;
use crate::model::{Arch, ModelGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    None,
    /// Everything except the fully connected classifier.
    Backbone,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Arch,
    pub num_classes: usize,
    pub input_side: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze: Freeze,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Rcmnet,
            num_classes: 2,
            input_side: 64,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            freeze: Freeze::None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub test_top1: f64,
}

pub fn curves_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_top1,test_top1\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_top1, r.test_top1
        ));
    }
    out
}

/// Mean over the batch of -log softmax(logits)[label], in log-sum-exp form.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        _ => {
            return Err(Error::Shape(format!(
                "cross_entropy expects [N,C] logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let x = logits.data();
    let mut loss = 0.0;
    let mut probs = vec![0.0; n * c];
    for r in 0..n {
        let row = &x[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            probs[r * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            probs[r * c + j] /= denom;
        }
        loss -= row[labels[r]] - mx - denom.ln();
    }
    loss /= n as f64;
    drop(x);

    let p = logits.clone();
    let labels = labels.to_vec();
    Tensor::from_op(
        vec![loss],
        vec![],
        vec![logits.clone()],
        Box::new(move |g| {
            // d loss / d logit = (softmax - onehot) / N
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                for j in 0..c {
                    let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                    gx[r * c + j] = g[0] * (probs[r * c + j] - onehot) / n as f64;
                }
            }
            p.accum_grad(&gx);
        }),
        "cross_entropy",
    )
}

/// SGD with classical momentum and L2 weight decay:
/// v <- momentum*v + grad + wd*param; param <- param - lr*v.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable parameter in place from its accumulated grad.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad();
            let mut p = t.to_vec();
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * p[i];
                p[i] -= self.lr * v[i];
            }
            t.set_data(&p);
        }
    }
}

fn batch_tensor(ds: &PreparedDataset, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let side = ds.side;
    let per = 3 * side * side;
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&ds.samples[i].0);
        labels.push(ds.samples[i].1);
    }
    Ok((
        Tensor::from_vec(data, &[indices.len(), 3, side, side])?,
        labels,
    ))
}

/// Argmax with ties broken by lowest class index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn topk_hit(row: &[f64], label: usize, k: usize) -> bool {
    // rank = number of classes strictly better, plus equal-score classes with
    // a lower index (deterministic tie-break)
    let mut rank = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[label] || (*v == row[label] && j < label) {
            rank += 1;
        }
    }
    rank < k
}

pub fn evaluate(model: &ModelGraph, ds: &PreparedDataset) -> Result<Metrics> {
    if ds.samples.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    if ds.class_names.len() != model.num_classes {
        return Err(Error::Data(format!(
            "evaluate: dataset has {} classes, model {}",
            ds.class_names.len(),
            model.num_classes
        )));
    }
    let c = model.num_classes;
    let k = c.min(5);
    let mut confusion = vec![vec![0usize; c]; c];
    let mut hits1 = 0usize;
    let mut hitsk = 0usize;
    let indices: Vec<usize> = (0..ds.samples.len()).collect();
    for chunk in indices.chunks(64) {
        let (batch, labels) = batch_tensor(ds, chunk)?;
        let logits = model.forward(&batch, false)?;
        let out = logits.to_vec();
        for (r, &label) in labels.iter().enumerate() {
            let row = &out[r * c..(r + 1) * c];
            let pred = argmax(row);
            confusion[label][pred] += 1;
            if pred == label {
                hits1 += 1;
            }
            if topk_hit(row, label, k) {
                hitsk += 1;
            }
        }
    }
    let total = ds.samples.len() as f64;
    Ok(Metrics {
        top1: hits1 as f64 / total,
        topk: hitsk as f64 / total,
        k,
        confusion,
    })
}

/// Seeded epoch loop: shuffle, batch, forward (train-mode BN unless
/// `bn_train` is off), cross-entropy, backward, SGD step. Evaluates on the
/// test set at the end of every epoch.
fn run_training(
    model: &ModelGraph,
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    cfg: &TrainConfig,
    bn_train: bool,
) -> Result<(Metrics, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train_ds.samples.is_empty() {
        return Err(Error::Data("train: empty dataset".into()));
    }
    if train_ds.class_names.len() != model.num_classes {
        return Err(Error::Data(format!(
            "train: dataset has {} classes, model {}",
            train_ds.class_names.len(),
            model.num_classes
        )));
    }
    let params = model.parameters();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(init::sub_seed(cfg.seed, "shuffle"));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..train_ds.samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        init::shuffle(&mut rng, &mut indices);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch, labels) = batch_tensor(train_ds, chunk)?;
            let logits = model.forward(&batch, bn_train)?;
            let loss = cross_entropy(&logits, &labels)?;
            loss_sum += loss.item() * chunk.len() as f64;
            let out = logits.to_vec();
            let c = model.num_classes;
            for (r, &label) in labels.iter().enumerate() {
                if argmax(&out[r * c..(r + 1) * c]) == label {
                    hits += 1;
                }
            }
            loss.backward()?;
            opt.step(&params);
            model.zero_grads();
        }
        let n = train_ds.samples.len() as f64;
        let test_metrics = evaluate(model, test_ds)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_top1: hits as f64 / n,
            test_top1: test_metrics.top1,
        });
    }
    let final_metrics = evaluate(model, test_ds)?;
    Ok((final_metrics, records))
}

pub fn train(
    model: &ModelGraph,
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<(Metrics, Vec<EpochRecord>)> {
    match cfg.freeze {
        Freeze::None => model.set_trainable(|_| true),
        Freeze::Backbone => model.set_trainable(|name| name.starts_with("fc.")),
    };
    run_training(model, train_ds, test_ds, cfg, true)
}

/// Transfer learning: load the pretrained backbone, replace the classifier
/// with a fresh seeded head for the new class count, freeze everything else
/// (including batch-norm running statistics, which stay in eval mode), and
/// fine-tune the classifier alone.
pub fn transfer_learn(
    pretrained: &Path,
    new_num_classes: usize,
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, Metrics, Vec<EpochRecord>)> {
    let mut model = ModelGraph::load_checkpoint(pretrained)?;
    if model.arch != cfg.arch {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint is {}, config wants {}",
            model.arch.id(),
            cfg.arch.id()
        )));
    }
    model.reset_classifier(new_num_classes, cfg.seed);
    let trainable = model.set_trainable(|name| name.starts_with("fc."));
    debug_assert!(trainable > 0);
    let (metrics, records) = run_training(&model, train_ds, test_ds, cfg, false)?;
    Ok((model, metrics, records))
}
