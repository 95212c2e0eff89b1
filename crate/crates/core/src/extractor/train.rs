use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backward, build_network, forward, sgd_momentum_step, ConvBlock, NetworkParams, NetworkSpec};
use crate::dataset::ImageType;
use crate::error::{Error, Result};
use crate::imagery::{augment, AugmentPolicy, NormImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub acc_assets: f64,
    pub acc_expenditure: f64,
    pub acc_income: f64,
    pub split: String,
}

impl EpochLog {
    fn new(epoch: usize, loss: f64, acc: [f64; 3], split: &str) -> Self {
        EpochLog {
            epoch,
            loss,
            acc_assets: acc[0],
            acc_expenditure: acc[1],
            acc_income: acc[2],
            split: split.to_string(),
        }
    }
}

/// Per-measure fraction of `p >= 0.5` agreeing with the label.
pub fn binary_accuracy(probabilities: &[[f64; 3]], labels: &[[bool; 3]]) -> [f64; 3] {
    let mut hits = [0usize; 3];
    for (p, y) in probabilities.iter().zip(labels) {
        for k in 0..3 {
            if (p[k] >= 0.5) == y[k] {
                hits[k] += 1;
            }
        }
    }
    hits.map(|h| h as f64 / probabilities.len().max(1) as f64)
}

/// Train a fresh network on one image type.
///
/// `eval` (if given) is scored each epoch without augmentation and logged
/// with split `validation`. The `train` rows carry the mean batch loss and
/// the running accuracy on the augmented batches.
pub fn train_extractor(
    spec: &NetworkSpec,
    train: &[(NormImage, [bool; 3])],
    eval: Option<&[(NormImage, [bool; 3])]>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(NetworkParams, Vec<EpochLog>)> {
    if config.batch_size == 0 || train.len() < 2 * config.batch_size {
        return Err(Error::validation(format!(
            "{} usable training images, need at least {} (2 x batch size)",
            train.len(),
            2 * config.batch_size
        )));
    }
    let mut params = build_network(spec)?;
    let mut log = Vec::new();
    let n = train.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut crate::rng::stream(seed, "extractor-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut probs = Vec::with_capacity(n);
        let mut seen = Vec::with_capacity(n);
        for batch in order.chunks(config.batch_size) {
            let images: Vec<NormImage> = batch
                .iter()
                .map(|&i| {
                    let mut rng = crate::rng::stream(seed, "extractor-augment", (epoch * n + i) as u64);
                    augment(&train[i].0, &mut rng, &config.augment)
                })
                .collect();
            let labels: Vec<[bool; 3]> = batch.iter().map(|&i| train[i].1).collect();
            let grads = backward(&params, &images, &labels)?;
            sgd_momentum_step(&mut params, &grads, config.learning_rate, config.momentum)?;
            loss_sum += grads.loss * batch.len() as f64;
            probs.extend_from_slice(&grads.probabilities);
            seen.extend_from_slice(&labels);
        }
        let loss = loss_sum / n as f64;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        log.push(EpochLog::new(epoch + 1, loss, binary_accuracy(&probs, &seen), "train"));
        if let Some(eval) = eval.filter(|e| !e.is_empty()) {
            let images: Vec<NormImage> = eval.iter().map(|(img, _)| img.clone()).collect();
            let labels: Vec<[bool; 3]> = eval.iter().map(|(_, y)| *y).collect();
            let out = forward(&params, &images)?;
            let eval_loss = super::bce_multilabel_loss(&out.probabilities, &labels);
            log.push(EpochLog::new(epoch + 1, eval_loss, binary_accuracy(&out.probabilities, &labels), "validation"));
        }
    }
    Ok((params, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub household_id: String,
    pub image_type: ImageType,
    /// Empty when the image is missing.
    pub values: Vec<f64>,
    pub missing: bool,
}

/// Penultimate activations (no augmentation), or a missing vector.
pub fn extract_features(
    params: &NetworkParams,
    household_id: &str,
    image_type: ImageType,
    image: Option<&NormImage>,
) -> Result<FeatureVector> {
    let values = match image {
        Some(img) => forward(params, std::slice::from_ref(img))?.penultimate.remove(0),
        None => Vec::new(),
    };
    Ok(FeatureVector {
        household_id: household_id.to_string(),
        image_type,
        missing: image.is_none(),
        values,
    })
}

/// A frozen, randomly initialized network with a wide penultimate layer.
pub fn offtheshelf_network(height: usize, width: usize, conv: &[usize], d_big: usize, seed: u64) -> Result<NetworkParams> {
    build_network(&NetworkSpec {
        height,
        width,
        conv: conv.iter().map(|&filters| ConvBlock { filters, kernel: 3 }).collect(),
        dense: vec![d_big],
        penultimate: super::PenultimateActivation::PostRelu,
        seed,
    })
}

pub fn offtheshelf_features(
    frozen: &NetworkParams,
    household_id: &str,
    image_type: ImageType,
    image: Option<&NormImage>,
) -> Result<FeatureVector> {
    extract_features(frozen, household_id, image_type, image)
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
