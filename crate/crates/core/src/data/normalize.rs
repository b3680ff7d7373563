use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Z-score statistics fitted on the training split.
///
/// `mean`/`std` hold one value (global) or one per entity. Standard
/// deviations are population deviations, clamped to 1 when zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    pub fn is_global(&self) -> bool {
        self.mean.len() == 1
    }

    fn stats_for(&self, entity: usize) -> (f64, f64) {
        if self.is_global() {
            (self.mean[0], self.std[0])
        } else {
            (self.mean[entity], self.std[entity])
        }
    }

    /// Normalise a tensor whose second-to-last axis indexes entities.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, m, s| v * s + m)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let shape = x.shape();
        let steps = *shape.last().unwrap_or(&1);
        let entities = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if !self.is_global() {
            assert_eq!(self.mean.len(), entities, "per-entity stats do not match tensor");
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let e = (i / steps) % entities;
                let (m, s) = self.stats_for(e);
                f(v, m, s)
            })
            .collect();
        Tensor::new(shape, data)
    }
}

/// Fit statistics on training inputs laid out `[S, N, T]`.
pub fn fit_normalizer(train_inputs: &Tensor, per_entity: bool) -> Result<NormalizationStats> {
    if train_inputs.is_empty() {
        return Err(Error::InvalidInput("cannot fit normalisation on empty input".into()));
    }
    let shape = train_inputs.shape();
    let steps = *shape.last().unwrap_or(&1);
    let entities = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
    let groups = if per_entity { entities } else { 1 };
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for (i, &v) in train_inputs.data().iter().enumerate() {
        let g = if per_entity { (i / steps) % entities } else { 0 };
        sum[g] += v;
        count[g] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
    let mut sq = vec![0.0; groups];
    for (i, &v) in train_inputs.data().iter().enumerate() {
        let g = if per_entity { (i / steps) % entities } else { 0 };
        sq[g] += (v - mean[g]).powi(2);
    }
    let std = sq
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(g, (s, c))| {
            let sd = (s / *c as f64).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                log::warn!("zero standard deviation for normalisation group {g}; using 1");
                1.0
            }
        })
        .collect();
    Ok(NormalizationStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_series_clamps_std() {
        let x = Tensor::full(&[3, 2, 4], 5.0);
        let s = fit_normalizer(&x, false).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.std, vec![1.0]);
        assert!(s.apply(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_population_std() {
        let x = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let s = fit_normalizer(&x, false).unwrap();
        assert_eq!(s.mean[0], 2.5);
        // sqrt(((1.5² + 0.5²) * 2) / 4) = sqrt(1.25)
        assert!((s.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
        assert!((s.std[0] - 1.118).abs() < 1e-3);
    }

    #[test]
    fn round_trip_global_and_per_entity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[5, 3, 8], 40.0, &mut rng);
        for per_entity in [false, true] {
            let s = fit_normalizer(&x, per_entity).unwrap();
            let back = s.invert(&s.apply(&x));
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn per_entity_groups() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 10.0, 30.0]);
        let s = fit_normalizer(&x, true).unwrap();
        assert_eq!(s.mean, vec![1.0, 20.0]);
        assert_eq!(s.std, vec![1.0, 10.0]);
    }

    #[test]
    fn empty_rejected() {
        assert!(fit_normalizer(&Tensor::zeros(&[0, 2, 8]), false).is_err());
    }
}
