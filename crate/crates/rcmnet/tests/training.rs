//! Training loop behavior: zero-learning-rate is a bitwise no-op, every
//! architecture takes optimization steps without error, the tiny network
//! actually fits the synthetic classes, and evaluation statistics are
//! internally consistent.

mod common;

use rcmnet::data::{self, SplitSpec};
use rcmnet::model::{Arch, ModelGraph};
use rcmnet::train::{self, Freeze, TrainConfig, curves_csv};

fn tiny_config(arch: Arch, classes: usize, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        arch,
        num_classes: classes,
        input_side: 32,
        epochs,
        batch_size: 16,
        lr,
        momentum: 0.9,
        weight_decay: 1e-4,
        seed: 0,
        freeze: Freeze::None,
    }
}

fn prepared_pair(classes: usize, per_class: usize, seed: u64) -> (data::PreparedDataset, data::PreparedDataset) {
    let ds = data::synth_generate(classes, per_class, 32, seed).unwrap();
    let (train, test) = data::split_train_test(&ds, &SplitSpec { train_fraction: 0.8, seed }).unwrap();
    (data::preprocess(&train, 32), data::preprocess(&test, 32))
}

fn param_bits(model: &ModelGraph) -> Vec<(String, Vec<u64>)> {
    model
        .parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.to_vec().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_unchanged() {
    let (tr, te) = prepared_pair(2, 10, 1);
    let model = ModelGraph::build_scaled(Arch::Rcmnet, 2, 32, 3, 8).unwrap();
    let before = param_bits(&model);
    let cfg = tiny_config(Arch::Rcmnet, 2, 2, 0.0);
    train::train(&model, &tr, &te, &cfg).unwrap();
    // weights, biases and attention tables untouched; only the batch-norm
    // running buffers (excluded here) may move in train mode
    assert_eq!(before, param_bits(&model));
}

#[test]
fn every_architecture_reduces_training_loss() {
    let (tr, te) = prepared_pair(2, 15, 2);
    for arch in Arch::ALL {
        let model = ModelGraph::build_scaled(arch, 2, 32, 0, 8).unwrap();
        let cfg = tiny_config(arch, 2, 4, 0.01);
        let (metrics, records) = train::train(&model, &tr, &te, &cfg).unwrap();
        assert_eq!(records.len(), 4, "{arch:?}");
        assert!(records.iter().all(|r| r.train_loss.is_finite()), "{arch:?}");
        let first = records.first().unwrap().train_loss;
        let last = records.last().unwrap().train_loss;
        assert!(last < first, "{arch:?}: loss {first} -> {last}");
        assert_eq!(metrics.confusion.iter().flatten().sum::<usize>(), te.samples.len());
    }
}

#[test]
fn tiny_network_fits_the_synthetic_classes() {
    let (tr, te) = prepared_pair(2, 50, 0);
    let model = ModelGraph::build_scaled(Arch::Rcmnet, 2, 32, 0, 8).unwrap();
    let cfg = tiny_config(Arch::Rcmnet, 2, 40, 0.01);
    let (_, records) = train::train(&model, &tr, &te, &cfg).unwrap();
    let best = records.iter().map(|r| r.train_top1).fold(0.0, f64::max);
    assert!(best >= 0.95, "best train top-1 {best}");

    let csv = curves_csv(&records);
    assert!(csv.starts_with("epoch,train_loss,train_top1,test_top1\n"));
    assert_eq!(csv.lines().count(), records.len() + 1);
}

#[test]
fn untrained_model_scores_at_chance_on_balanced_classes() {
    let ds = data::synth_generate(8, 50, 32, 6).unwrap();
    let prepared = data::preprocess(&ds, 32);
    let model = ModelGraph::build_scaled(Arch::Rcmnet, 8, 32, 13, 8).unwrap();
    let metrics = train::evaluate(&model, &prepared).unwrap();
    // 400 balanced samples, chance 1/8: stay within 3 sigma of the binomial
    let sigma = (0.125 * 0.875 / 400.0_f64).sqrt();
    assert!(
        (metrics.top1 - 0.125).abs() <= 3.0 * sigma,
        "top-1 {} vs chance 0.125",
        metrics.top1
    );
    assert!(metrics.topk >= metrics.top1);
    assert_eq!(metrics.k, 5);

    // confusion-matrix internal consistency: trace / total equals top-1
    // exactly, and each row sums to the true per-class count
    let trace: usize = (0..8).map(|i| metrics.confusion[i][i]).sum();
    assert_eq!(trace as f64 / 400.0, metrics.top1);
    for row in &metrics.confusion {
        assert_eq!(row.iter().sum::<usize>(), 50);
    }
}

#[test]
fn invalid_configs_and_labels_are_rejected() {
    let (tr, te) = prepared_pair(2, 5, 4);
    let model = ModelGraph::build_scaled(Arch::Rcmnet, 2, 32, 0, 8).unwrap();
    let mut cfg = tiny_config(Arch::Rcmnet, 2, 1, 0.01);
    cfg.epochs = 0;
    assert!(train::train(&model, &tr, &te, &cfg).is_err());
    cfg.epochs = 1;
    cfg.lr = -1.0;
    assert!(train::train(&model, &tr, &te, &cfg).is_err());

    let logits = rcmnet::tensor::Tensor::zeros(&[2, 3]);
    assert!(train::cross_entropy(&logits, &[0, 3]).is_err());
}
