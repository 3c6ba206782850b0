use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{FrameNetConfig, VelocityNetConfig};

use super::ModelSpec;

/// Hyperparameter regime chosen from the number of input frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Three or more frames: fine steps and light regularization.
    MultiFrame,
    /// Exactly two frames: coarse steps and heavy regularization, which pushes
    /// towards near-linear motion.
    TwoFrame,
}

impl Regime {
    pub fn for_frames(num_frames: usize) -> Self {
        if num_frames == 2 {
            Regime::TwoFrame
        } else {
            Regime::MultiFrame
        }
    }

    /// `(dt, lambda_v, lambda_i, alpha)`.
    pub fn defaults(self) -> (f64, f64, f64, f64) {
        match self {
            Regime::MultiFrame => (0.02, 0.01, 0.01, 0.0),
            Regime::TwoFrame => (0.2, 10.0, 10.0, 0.5),
        }
    }
}

/// Explicit values that take precedence over the regime defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegimeOverrides {
    pub dt: Option<f64>,
    pub lambda_v: Option<f64>,
    pub lambda_i: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_layers: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub regime: Regime,
    pub dt: f64,
    pub lambda_v: f64,
    pub lambda_i: f64,
    pub alpha: f64,
    pub seed: u64,
    pub log_every: u64,
    pub frame: FrameNetConfig,
    pub velocity: VelocityNetConfig,
    pub adam: AdamConfig,
    /// Upper bound on inertia start points drawn from each batch.
    pub inertia_samples: usize,
    /// Rows per recorded tape; bounds memory without changing the result.
    pub chunk_rows: usize,
}

impl TrainConfig {
    /// Defaults for a clip with `num_frames` frames, regime selected automatically.
    pub fn for_frames(num_frames: usize) -> Self {
        let regime = Regime::for_frames(num_frames);
        let (dt, lambda_v, lambda_i, alpha) = regime.defaults();
        Self {
            num_layers: 4,
            epochs: 400,
            batch_size: 4096,
            gamma: 5.0,
            regime,
            dt,
            lambda_v,
            lambda_i,
            alpha,
            seed: 0,
            log_every: 1,
            frame: FrameNetConfig::default(),
            velocity: VelocityNetConfig::default(),
            adam: AdamConfig::default(),
            inertia_samples: 256,
            chunk_rows: 256,
        }
    }

    pub fn with_overrides(mut self, o: RegimeOverrides) -> Self {
        self.dt = o.dt.unwrap_or(self.dt);
        self.lambda_v = o.lambda_v.unwrap_or(self.lambda_v);
        self.lambda_i = o.lambda_i.unwrap_or(self.lambda_i);
        self.alpha = o.alpha.unwrap_or(self.alpha);
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_v: self.lambda_v, lambda_i: self.lambda_i, alpha: self.alpha }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            num_layers: self.num_layers,
            frame: self.frame,
            velocity: self.velocity,
            gamma: self.gamma,
            dt: self.dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.num_layers, "num_layers"),
            (self.batch_size, "batch_size"),
            (self.inertia_samples, "inertia_samples"),
            (self.chunk_rows, "chunk_rows"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{} must be positive", name)));
            }
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.dt > 0.0 && self.dt <= 2.0) {
            return Err(Error::invalid(format!("dt must lie in (0, 2], got {}", self.dt)));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        self.weights().validate()
    }
}
