//! Mini-batch training loop shared by every model in the crate.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Gradients};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Samples per gradient chunk. Batches are split into fixed chunks that may be
/// evaluated on different threads; the chunk layout never depends on the
/// thread count, so results are reproducible on any machine.
pub(crate) const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; `None` disables early stopping.
    pub patience: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 180,
            patience: Some(20),
            learning_rate: 1e-3,
            batch_size: 64,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub valid_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based; 0 when no epoch ran).
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub stopped_early: bool,
    pub steps: u64,
}

impl TrainingLog {
    pub fn train_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_mae).collect()
    }

    pub fn last_train_mae(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_mae)
    }
}

/// Loss value and gradients (by parameter name) of one chunk.
pub(crate) struct ChunkGrad {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
}

/// Pull the gradient of every bound parameter out of a backward pass.
pub(crate) fn collect_grads(bound: &Bound, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
    bound
        .iter()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_string(), g.to_vec())))
        .collect()
}

/// Copy samples `idx` of a `[S, ...]` tensor into a new `[idx.len(), ...]` tensor.
pub(crate) fn stack(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let inner: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        data.extend_from_slice(t.outer(i));
    }
    Tensor::new(&shape, data)
}

/// Evaluate `f` on consecutive chunks of `0..n` and concatenate the results
/// in order.
pub(crate) fn map_chunks<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    let idx: Vec<usize> = (0..n).collect();
    let parts: Vec<Result<Vec<f64>>> = idx.par_chunks(CHUNK).map(&f).collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn chunk_seed(seed: u64, epoch: usize, batch: usize, chunk: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 40) ^ ((batch as u64) << 20) ^ chunk as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train `params` with Adam on mini-batches of `0..n_train`.
///
/// `chunk_grad(params, indices, seed)` returns the mean loss over the listed
/// samples and its gradients; `validate(params)` scores the current
/// parameters (lower is better) or returns `None` when there is no validation
/// data, in which case the training loss selects the kept epoch. On return
/// `params` hold the best epoch's values.
pub(crate) fn fit<G, V>(
    params: &mut ParamStore,
    n_train: usize,
    cfg: &TrainConfig,
    chunk_grad: G,
    validate: V,
) -> Result<TrainingLog>
where
    G: Fn(&ParamStore, &[usize], u64) -> Result<ChunkGrad> + Sync,
    V: Fn(&ParamStore) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut opt = Adam::new(cfg.learning_rate, cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen_view: &ParamStore = params;
            let parts: Vec<Result<(usize, ChunkGrad)>> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(c, idx)| {
                    chunk_grad(frozen_view, idx, chunk_seed(cfg.seed, epoch, b, c)).map(|g| (idx.len(), g))
                })
                .collect();
            let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for part in parts {
                let (len, g) = part?;
                let w = len as f64 / batch.len() as f64;
                batch_loss += w * g.loss;
                for (name, grad) in g.grads {
                    let acc = total.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, v) in acc.iter_mut().zip(&grad) {
                        *a += w * v;
                    }
                }
            }
            if !batch_loss.is_finite() || total.values().flatten().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, best));
            }
            opt.step(params, &total);
            if !params.all_finite() {
                return Err(diverged(epoch, best));
            }
            loss_sum += batch_loss * batch.len() as f64;
        }
        let train_mae = loss_sum / n_train as f64;
        let valid_mae = validate(params)?;
        let score = valid_mae.unwrap_or(train_mae);
        log::debug!("epoch {epoch}: train {train_mae:.4} valid {valid_mae:?}");
        log.epochs.push(EpochRecord {
            epoch,
            train_mae,
            valid_mae,
        });
        if !score.is_finite() {
            return Err(diverged(epoch, best));
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, params.clone()));
            log.best_epoch = epoch;
            log.best_score = Some(score);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    log.steps = opt.steps();
    Ok(log)
}

fn diverged(epoch: usize, best: Option<(f64, ParamStore)>) -> Error {
    log::error!("training diverged in epoch {epoch}");
    Error::Diverged {
        epoch,
        last_good: best.map(|(_, p)| Box::new(p)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use std::sync::Arc;

    /// Least-absolute-deviation fit of a single scale `w` to `y = 3x`.
    fn line_problem() -> (Tensor, Tensor) {
        let x: Vec<f64> = (1..=40).map(|i| i as f64 / 10.0).collect();
        let y = x.iter().map(|v| 3.0 * v).collect();
        (Tensor::new(&[40, 1], x), Tensor::new(&[40, 1], y))
    }

    fn grad_fn<'a>(x: &'a Tensor, y: &'a Tensor) -> impl Fn(&ParamStore, &[usize], u64) -> Result<ChunkGrad> + Sync + 'a {
        move |p, idx, _| {
            let mut tape = Tape::new();
            let bound = tape.bind(p);
            let xb = tape.constant(stack(x, idx));
            let w = bound.get("w");
            let b = bound.get("b");
            let pred = tape.dense(xb, w, b);
            let target = Arc::new(stack(y, idx).into_data());
            let loss = tape.mean_abs_error(pred, target);
            let g = tape.backward(loss);
            Ok(ChunkGrad {
                loss: tape.value(loss).data()[0],
                grads: collect_grads(&bound, &g),
            })
        }
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 1], vec![0.1]));
        p.insert("b", Tensor::new(&[1], vec![0.0]));
        p
    }

    #[test]
    fn learns_a_line() {
        let (x, y) = line_problem();
        let mut p = store();
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 0.05,
            batch_size: 8,
            patience: None,
            ..TrainConfig::default()
        };
        let log = fit(&mut p, 40, &cfg, grad_fn(&x, &y), |_| Ok(None)).unwrap();
        assert!((p.tensor("w").data()[0] - 3.0).abs() < 0.05, "{:?}", p.tensor("w"));
        assert!(log.last_train_mae().unwrap() < 0.1);
        assert_eq!(log.epochs.len(), 300);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (x, y) = line_problem();
        let mut p = store();
        let before = p.clone();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        fit(&mut p, 40, &cfg, grad_fn(&x, &y), |_| Ok(None)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (x, y) = line_problem();
        let mut p = store();
        let cfg = TrainConfig {
            epochs: 50,
            patience: Some(3),
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        // Validation gets worse after the first epoch.
        let calls = std::cell::Cell::new(0);
        let log = fit(&mut p, 40, &cfg, grad_fn(&x, &y), |_| {
            calls.set(calls.get() + 1);
            Ok(Some(calls.get() as f64))
        })
        .unwrap();
        assert!(log.stopped_early);
        assert_eq!(log.epochs.len(), 4);
        assert_eq!(log.best_epoch, 1);
    }

    #[test]
    fn nan_loss_reports_divergence() {
        let (x, mut y) = line_problem();
        y.data_mut()[3] = f64::NAN;
        let mut p = store();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        match fit(&mut p, 40, &cfg, grad_fn(&x, &y), |_| Ok(None)) {
            Err(Error::Diverged { epoch, last_good }) => {
                assert_eq!(epoch, 1);
                assert!(last_good.is_none());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn reproducible() {
        let (x, y) = line_problem();
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = store();
            let log = fit(&mut p, 40, &cfg, grad_fn(&x, &y), |_| Ok(None)).unwrap();
            (p, log)
        };
        assert_eq!(run(), run());
    }
}
