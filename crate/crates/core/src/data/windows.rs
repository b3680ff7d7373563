//! Sliding input/target windows and the chronological split.

use serde::{Deserialize, Serialize};

use super::flows::FlowSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_T_IN: usize = 8;
pub const DEFAULT_T_OUT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Fractions of windows per split. The defaults are 70% train, 20% test, 10% valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            test: 0.2,
            valid: 0.1,
        }
    }
}

impl SplitRatios {
    /// Window counts `(train, valid, test)` for `total` windows: train and test
    /// take the floor of their share, valid takes the remainder.
    pub fn sizes(&self, total: usize) -> Result<(usize, usize, usize)> {
        let sum = self.train + self.test + self.valid;
        if (sum - 1.0).abs() > 1e-9 || [self.train, self.test, self.valid].iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidInput(format!("split ratios must be non-negative and sum to 1, got {sum}")));
        }
        let train = (total as f64 * self.train).floor() as usize;
        let test = (total as f64 * self.test).floor() as usize;
        let valid = total - train - test;
        Ok((train, valid, test))
    }
}

/// Input windows `[S, N, T_in]` with the target windows `[S, K, T_out]`
/// that immediately follow them.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub split: Split,
    pub inputs: Tensor,
    pub targets: Tensor,
    /// Series step at which each sample's input window begins.
    pub first_steps: Vec<usize>,
    pub t_in: usize,
    pub t_out: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.first_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_steps.is_empty()
    }

    pub fn input_entities(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn target_entities(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn input(&self, s: usize) -> &[f64] {
        self.inputs.outer(s)
    }

    pub fn target(&self, s: usize) -> &[f64] {
        self.targets.outer(s)
    }

    /// The first `n` samples (same split label).
    pub fn take(&self, n: usize) -> WindowedDataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn subset(&self, idx: &[usize]) -> WindowedDataset {
        let (n, k) = (self.input_entities(), self.target_entities());
        let mut inputs = Vec::with_capacity(idx.len() * n * self.t_in);
        let mut targets = Vec::with_capacity(idx.len() * k * self.t_out);
        for &s in idx {
            inputs.extend_from_slice(self.input(s));
            targets.extend_from_slice(self.target(s));
        }
        WindowedDataset {
            split: self.split,
            inputs: Tensor::new(&[idx.len(), n, self.t_in], inputs),
            targets: Tensor::new(&[idx.len(), k, self.t_out], targets),
            first_steps: idx.iter().map(|&s| self.first_steps[s]).collect(),
            t_in: self.t_in,
            t_out: self.t_out,
        }
    }

    /// Replace the input windows (e.g. with normalised values).
    pub fn with_inputs(&self, inputs: Tensor) -> WindowedDataset {
        assert_eq!(inputs.shape(), self.inputs.shape());
        WindowedDataset {
            inputs,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: WindowedDataset,
    pub valid: WindowedDataset,
    pub test: WindowedDataset,
}

impl DatasetSplits {
    pub fn map_inputs(&self, f: impl Fn(&Tensor) -> Tensor) -> DatasetSplits {
        DatasetSplits {
            train: self.train.with_inputs(f(&self.train.inputs)),
            valid: self.valid.with_inputs(f(&self.valid.inputs)),
            test: self.test.with_inputs(f(&self.test.inputs)),
        }
    }
}

/// Number of stride-1 windows in a series of `steps` steps.
pub fn window_count(steps: usize, t_in: usize, t_out: usize) -> usize {
    (steps + 1).saturating_sub(t_in + t_out)
}

/// Cut stride-1 windows from `inputs` (history) and `targets` (future) and
/// split them chronologically: train first, then valid, then test.
pub fn make_windows(
    inputs: &FlowSeries,
    targets: &FlowSeries,
    t_in: usize,
    t_out: usize,
    ratios: SplitRatios,
) -> Result<DatasetSplits> {
    if t_in == 0 || t_out == 0 {
        return Err(Error::InvalidInput("window lengths must be positive".into()));
    }
    if inputs.interval != targets.interval
        || inputs.start_timestamp != targets.start_timestamp
        || inputs.steps() != targets.steps()
    {
        return Err(Error::InvalidInput(
            "input and target series must share interval, start and length".into(),
        ));
    }
    let steps = inputs.steps();
    if steps < t_in + t_out {
        return Err(Error::InvalidInput(format!(
            "series of {steps} steps is shorter than one window ({} steps)",
            t_in + t_out
        )));
    }
    let total = window_count(steps, t_in, t_out);
    let (n_train, n_valid, n_test) = ratios.sizes(total)?;

    let build = |split: Split, range: std::ops::Range<usize>| {
        let (n, k) = (inputs.entities(), targets.entities());
        let mut x = Vec::with_capacity(range.len() * n * t_in);
        let mut y = Vec::with_capacity(range.len() * k * t_out);
        for t in range.clone() {
            for e in 0..n {
                x.extend_from_slice(&inputs.entity(e)[t..t + t_in]);
            }
            for e in 0..k {
                y.extend_from_slice(&targets.entity(e)[t + t_in..t + t_in + t_out]);
            }
        }
        WindowedDataset {
            split,
            inputs: Tensor::new(&[range.len(), n, t_in], x),
            targets: Tensor::new(&[range.len(), k, t_out], y),
            first_steps: range.collect(),
            t_in,
            t_out,
        }
    };
    Ok(DatasetSplits {
        train: build(Split::Train, 0..n_train),
        valid: build(Split::Valid, n_train..n_train + n_valid),
        test: build(Split::Test, n_train + n_valid..n_train + n_valid + n_test),
    })
}
