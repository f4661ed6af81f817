use rand::seq::SliceRandom;

use super::{Adam, AdamConfig, Embedding, HeadConfig, HeadModel, Sample, OUTPUT_DIM};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample training loss of each epoch, measured before each
    /// batch's update.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the whole training set with the final parameters.
    pub final_loss: f64,
    pub epochs_run: usize,
    pub seed: u64,
}

/// Features converted to `T` plus normalized consensus targets.
pub(crate) fn training_pairs<T: Scalar>(dataset: &Dataset) -> Result<Vec<(Vec<T>, [T; OUTPUT_DIM])>> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let target = r.target()?;
            Ok((
                r.feature.values().iter().map(|&v| T::of(v)).collect(),
                target.values().map(T::of),
            ))
        })
        .collect()
}

/// Trains the head with mini-batch Adam on normalized consensus targets.
///
/// One seeded generator drives initialization and then the per-epoch
/// shuffles, so a fixed config reproduces the same parameters bit for bit.
pub fn train<T: Scalar>(dataset: &Dataset, config: &HeadConfig) -> Result<(HeadModel<T>, TrainReport)> {
    config.validate()?;
    if dataset.feature_dim() != config.input_dim {
        return Err(Error::Config(format!(
            "dataset has {}-D features, head expects {}",
            dataset.feature_dim(),
            config.input_dim
        )));
    }
    let pairs = training_pairs::<T>(dataset)?;
    let samples: Vec<Sample<'_, T>> = pairs
        .iter()
        .map(|(f, t)| Sample {
            feature: f,
            target: *t,
        })
        .collect();

    let mut rng = crate::seeded_rng(config.seed);
    let mut model = HeadModel::initialize_with(config.clone(), &mut rng);
    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), &shapes);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let grads = model.gradients(&batch)?;
            if !grads.loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += grads.loss * T::of_usize(chunk.len());
            adam.update(&mut model.param_slices_mut(), &grads.param_slices());
        }
        let mean = (total / T::of_usize(samples.len())).as_f64();
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        epoch_losses.push(mean);
    }

    let final_loss = model.batch_loss(&samples)?.as_f64();
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: config.epochs });
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            final_loss,
            epochs_run: config.epochs,
            seed: config.seed,
        },
    ))
}

/// One embedding per record, in dataset order.
pub fn embed_all<T: Scalar>(model: &HeadModel<T>, dataset: &Dataset) -> Result<Vec<Embedding<T>>> {
    if dataset.feature_dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "dataset has {}-D features, model expects {}",
            dataset.feature_dim(),
            model.input_dim()
        )));
    }
    let mut x = Vec::with_capacity(dataset.feature_dim());
    dataset
        .records()
        .iter()
        .map(|r| {
            x.clear();
            x.extend(r.feature.values().iter().map(|&v| T::of(v)));
            Ok(Embedding {
                nodule_id: r.nodule_id.clone(),
                values: model.forward(&x)?.embedding,
            })
        })
        .collect()
}
