use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, ops, Graph, Tensor, Var};

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current batch; training updates the running statistics.
    Train,
    /// Running statistics accumulated during training.
    Frozen,
    /// Statistics blended from a test batch by [`BatchNormState::adapt`].
    Adaptive,
}

/// How test-batch and training statistics are blended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendRule {
    /// `s̄ = ρ·s_t + (1-ρ)·s_T` on standard deviations.
    #[default]
    StdDev,
    /// `s̄² = ρ·s_t² + (1-ρ)·s_T²` on variances.
    Variance,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_RUNNING_MOMENTUM: f64 = 0.1;

/// Per-channel batch-norm statistics and affine parameters.
///
/// `eps` is a floor on the variance: channels are divided by
/// `sqrt(max(var, eps))`, so well-spread channels are standardized exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub channels: usize,
    pub mu_train: Vec<f64>,
    pub var_train: Vec<f64>,
    pub mu_test: Vec<f64>,
    pub var_test: Vec<f64>,
    pub mu_bar: Vec<f64>,
    pub var_bar: Vec<f64>,
    std_bar: Vec<f64>,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub rho: f64,
    pub mode: BnMode,
    pub eps: f64,
    /// Exponential-averaging factor for the running statistics in Train mode.
    pub running_momentum: f64,
    has_running_stats: bool,
    adapted: bool,
}

impl BatchNormState {
    /// Fresh layer: unit affine map, running statistics (0, 1) not yet trained.
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            mu_train: vec![0.0; channels],
            var_train: vec![1.0; channels],
            mu_test: vec![0.0; channels],
            var_test: vec![1.0; channels],
            mu_bar: vec![0.0; channels],
            var_bar: vec![1.0; channels],
            std_bar: vec![1.0; channels],
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            rho: 0.0,
            mode: BnMode::Train,
            eps: DEFAULT_EPS,
            running_momentum: DEFAULT_RUNNING_MOMENTUM,
            has_running_stats: false,
            adapted: false,
        }
    }

    /// Layer with known training statistics, ready for Frozen inference.
    pub fn with_running_stats(mean: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), var.len());
        let mut s = Self::new(mean.len());
        s.mu_train = mean;
        s.var_train = var;
        s.has_running_stats = true;
        s.mode = BnMode::Frozen;
        s
    }

    pub fn has_running_stats(&self) -> bool {
        self.has_running_stats
    }

    pub fn is_adapted(&self) -> bool {
        self.adapted
    }

    pub(crate) fn mark_trained(&mut self) {
        self.has_running_stats = true;
    }

    /// Blended standard deviation used in Adaptive mode.
    pub fn std_bar(&self) -> &[f64] {
        &self.std_bar
    }

    fn frozen_denom(&self) -> Vec<f64> {
        self.var_train.iter().map(|&v| v.max(self.eps).sqrt()).collect()
    }

    fn adaptive_denom(&self) -> Vec<f64> {
        let floor = self.eps.sqrt();
        self.std_bar.iter().map(|&s| s.max(floor)).collect()
    }

    fn check_channels(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (n, c, spatial) = ops::channel_layout(x)?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("layer has {} channels, input {:?}", self.channels, x.shape()),
            });
        }
        Ok((n, spatial))
    }

    /// Pre-affine standardized activations for the current mode, without
    /// touching any statistics.
    pub fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let (n, spatial) = self.check_channels(x)?;
        match self.mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let (mean, m2) = kernels::channel_moments(x.data(), n, self.channels, spatial);
                let denom: Vec<f64> =
                    m2.iter().map(|s| (s / (n * spatial) as f64).max(self.eps).sqrt()).collect();
                ops::normalize_channels(x, &mean, &denom)
            }
            BnMode::Frozen => ops::normalize_channels(x, &self.mu_train, &self.frozen_denom()),
            BnMode::Adaptive => {
                if !self.adapted {
                    return Err(Error::NotAdapted);
                }
                ops::normalize_channels(x, &self.mu_bar, &self.adaptive_denom())
            }
        }
    }

    /// Inference forward pass (no graph, no statistic updates).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xhat = self.standardize(x)?;
        ops::channel_affine(&xhat, self.gamma.data(), self.beta.data())
    }

    /// Graph forward pass. In Train mode the batch statistics are returned so
    /// the caller can fold them into the running statistics.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>, usize)>)> {
        let (n, spatial) = self.check_channels(g.value(x))?;
        let (xhat, stats) = match self.mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let (v, mean, var) = g.batch_standardize(x, self.eps)?;
                (v, Some((mean, var, n * spatial)))
            }
            BnMode::Frozen => (g.standardize(x, &self.mu_train, &self.frozen_denom())?, None),
            BnMode::Adaptive => {
                if !self.adapted {
                    return Err(Error::NotAdapted);
                }
                (g.standardize(x, &self.mu_bar, &self.adaptive_denom())?, None)
            }
        };
        Ok((g.channel_affine(xhat, gamma, beta)?, stats))
    }

    /// Folds one training batch's statistics into the running statistics.
    /// `var` is the biased batch variance over `count` values; the running
    /// variance tracks the unbiased estimate.
    pub(crate) fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.running_momentum;
        let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.channels {
            self.mu_train[c] = (1.0 - m) * self.mu_train[c] + m * mean[c];
            self.var_train[c] = (1.0 - m) * self.var_train[c] + m * var[c] * correction;
        }
        self.has_running_stats = true;
    }

    /// Estimates test statistics from `x` (unbiased variance) and blends them
    /// with the training statistics using momentum `rho`. Switches the layer
    /// to Adaptive mode.
    pub fn adapt(&mut self, x: &Tensor, rho: f64, rule: BlendRule) -> Result<()> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidMomentum(rho));
        }
        let (n, spatial) = self.check_channels(x)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let (mean, m2) = kernels::channel_moments(x.data(), n, self.channels, spatial);
        let count = n * spatial;
        self.mu_test = mean;
        self.var_test = m2.iter().map(|s| s / (count - 1) as f64).collect();
        for c in 0..self.channels {
            self.mu_bar[c] = rho * self.mu_test[c] + (1.0 - rho) * self.mu_train[c];
            match rule {
                BlendRule::StdDev => {
                    let s = rho * self.var_test[c].sqrt() + (1.0 - rho) * self.var_train[c].sqrt();
                    self.std_bar[c] = s;
                    self.var_bar[c] = s * s;
                }
                BlendRule::Variance => {
                    let v = rho * self.var_test[c] + (1.0 - rho) * self.var_train[c];
                    self.var_bar[c] = v;
                    self.std_bar[c] = v.sqrt();
                }
            }
        }
        self.rho = rho;
        self.adapted = true;
        self.mode = BnMode::Adaptive;
        Ok(())
    }
}
