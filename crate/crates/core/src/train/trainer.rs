use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{FpsStart, PointCloud};
use crate::model::MgtModel;
use crate::nn::{Graph, ParamStore};

use super::{augment, cosine_lr, label_smooth_ce, Metrics, Sgd, TrainConfig};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,test_oa,test_macc";

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_oa: f64,
    pub test_macc: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.test_oa, self.test_macc
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Parameters of the epoch with the highest test OA (earliest on ties).
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_oa: f64,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Random stream for one sample of one epoch. Streams depend only on
/// `(seed, epoch, index)`, never on processing order.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | index as u64);
    rng
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Overall and mean class accuracy with augmentation off and the FPS start
/// pinned to the first point.
pub fn evaluate(model: &MgtModel, data: &[PointCloud]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let pairs = data
        .iter()
        .map(|c| Ok((c.label, model.predict(c, FpsStart::Pinned(0))?.class)))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_pairs(model.config().num_classes, &pairs)
}

fn accumulate(total: &mut [Option<Vec<f64>>], grads: Vec<Option<Vec<f64>>>) {
    for (acc, g) in total.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match acc {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => *acc = Some(g),
        }
    }
}

/// Scales every gradient so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    }
    norm
}

/// Mini-batch training with per-epoch evaluation on `test`.
///
/// The run is a pure function of the model's initial parameters, the data
/// and `config`. `on_epoch` sees every log row as it is produced.
pub fn train(
    model: &mut MgtModel,
    train: &[PointCloud],
    test: &[PointCloud],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let classes = model.config().num_classes;
    if let Some(c) = train.iter().chain(test).find(|c| c.label >= classes) {
        return Err(Error::config(format!("label {} out of range for {classes} classes", c.label)));
    }
    let mut sgd = Sgd::new(&model.params, config.momentum, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut steps = 0;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr0);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng(config.seed, epoch));

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
            for &i in &batch {
                let mut rng = sample_rng(config.seed, epoch, i);
                let cloud = augment(&train[i], &config.aug, &mut rng);
                let start = FpsStart::Pinned(rng.random_range(0..cloud.len()));

                let mut tape = Tape::new();
                let mut g = Graph::new(&mut tape, &model.params);
                let (loss, sample_grads) = (|| {
                    let logits = model.logits(&mut g, &cloud, start)?;
                    let loss = label_smooth_ce(g.tape, logits, &[cloud.label], config.smoothing)?;
                    let scaled = g.tape.mul_scalar(loss, 1.0 / batch.len() as f64)?;
                    let mut gr = g.tape.backward(scaled)?;
                    Ok::<_, Error>((g.tape.value(loss).item(), g.collect(&mut gr)))
                })()
                .map_err(|e| e.context(format!("epoch {} batch {b} sample {i}", epoch + 1)))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "loss" }.context(format!("epoch {} batch {b}", epoch + 1)));
                }
                loss_sum += loss;
                accumulate(&mut grads, sample_grads);
            }
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut grads, config.grad_clip);
            }
            sgd.step(&mut model.params, &grads, lr)?;
            steps += 1;
        }

        let metrics = if test.is_empty() { None } else { Some(evaluate(model, test)?) };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            test_oa: metrics.as_ref().map_or(0.0, |m| m.oa),
            test_macc: metrics.as_ref().map_or(0.0, |m| m.macc),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(oa, _, _)| record.test_oa > *oa) {
            best = Some((record.test_oa, record.epoch, model.params.clone()));
        }
        log.push(record);
    }

    let (best_oa, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        log,
        best_params,
        best_epoch,
        best_oa,
        steps,
    })
}
