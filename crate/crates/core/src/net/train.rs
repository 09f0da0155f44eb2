//! Plain-SGD training of the EPW networks with L1-based early stopping.

use super::{backward, pgm_to_input, EpwNetwork, Tensor3};
use crate::pgm::{encode_dense, encode_epw, ScanFrame, SensorSpec};
use crate::real::Real;
use crate::scene::DenseFrame;
use crate::{seed, Error, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Training protocol parameters. Defaults: batch 8, learning rate 1e-5,
/// 350 epochs, L2 1e-4, patience 20.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig<T: Real> {
    pub batch_size: usize,
    pub learning_rate: T,
    pub max_epochs: usize,
    pub lambda: T,
    pub patience: usize,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: T::of(1e-5),
            max_epochs: 350,
            lambda: T::of(1e-4),
            patience: 20,
            seed: 0,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        if self.learning_rate <= T::zero() {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.lambda < T::zero() {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config("patience must be < max_epochs".into()));
        }
        Ok(())
    }
}

/// One normalized training pair: network input and raw EPW target.
#[derive(Clone, Debug)]
pub struct TrainSample<T: Real> {
    pub input: Tensor3<T>,
    pub target: Tensor3<T>,
}

/// Build per-echo training pairs from (dense, ground-truth) frames.
pub fn make_training_set<T: Real>(
    pairs: &[(DenseFrame<T>, ScanFrame<T>)],
    spec: &SensorSpec<T>,
    echo: u8,
) -> Result<Vec<TrainSample<T>>> {
    pairs
        .iter()
        .map(|(dense, truth)| {
            let input = pgm_to_input(&encode_dense(dense, spec, echo)?, spec)?;
            let epw = encode_epw(truth, spec, echo)?;
            let target =
                Tensor3::from_data(1, spec.rows(), spec.cols(), epw.channel(0).to_vec());
            Ok(TrainSample { input, target })
        })
        .collect()
}

/// Mean absolute EPW error over cells that carry a return (nonzero distance
/// in the input); the L1 score used for early stopping.
pub fn val_l1<T: Real>(net: &EpwNetwork<T>, set: &[TrainSample<T>]) -> Result<T> {
    let mut total = T::zero();
    let mut cells = 0u64;
    for s in set {
        let pred = net.forward(&s.input)?;
        let plane = s.input.h * s.input.w;
        for i in 0..plane {
            if s.input.data[i] > T::zero() {
                total += (pred.data[i] - s.target.data[i]).abs();
                cells += 1;
            }
        }
    }
    if cells == 0 {
        return Ok(T::zero());
    }
    Ok(total / T::of(cells as f64))
}

/// Per-epoch record kept with the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_l1: f64,
}

/// Train with plain SGD: seeded shuffling, mini-batch mean gradients, early
/// stop when the validation L1 fails to improve for `patience` epochs. The
/// network is left at the best-validation parameters.
pub fn train<T: Real>(
    net: &mut EpwNetwork<T>,
    train_set: &[TrainSample<T>],
    val_set: &[TrainSample<T>],
    cfg: &TrainConfig<T>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let dims = (train_set[0].input.h, train_set[0].input.w);
    for s in train_set.iter().chain(val_set) {
        if (s.input.h, s.input.w) != dims {
            return Err(Error::Dim("all frames must share the same dims".into()));
        }
    }

    let mut rng = seed::stream(cfg.seed, &[0x7261_696e]);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut strikes = 0usize;

    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<(T, EpwNetwork<T>)> = chunk
                .par_iter()
                .map(|&i| backward(net, &train_set[i].input, &train_set[i].target, cfg.lambda))
                .collect::<Result<Vec<_>>>()?;
            let scale = cfg.learning_rate / T::of(chunk.len() as f64);
            // Sequential accumulation in chunk order keeps updates deterministic.
            for (l, grads) in &results {
                loss_sum += l.as_f64();
                for (p, g) in net.param_vecs_mut().into_iter().zip(grads.param_vecs()) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= scale * *gv;
                    }
                }
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let v = val_l1(net, val_set)?.as_f64();
        history.push(EpochStats { train_loss, val_l1: v });
        if v < best_val {
            best_val = v;
            best = net.clone();
            strikes = 0;
        } else {
            strikes += 1;
            if strikes > cfg.patience {
                break;
            }
        }
    }
    *net = best;
    Ok(history)
}
