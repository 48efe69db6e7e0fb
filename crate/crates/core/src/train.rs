//! Minibatch Adam on the mean-squared one-step loss
//! `(1/J) Σ_j ‖Î Z_j + N(Z_j) - z_j‖²`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::MemoryWindowDataset;
use crate::error::{check_dim, Error, Result};
use crate::net::{GradientSet, NetworkParams};
use crate::seed;
use crate::textio::fmt_f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// When set, the step size decays geometrically from `learning_rate` to
    /// this value over the run (one factor per epoch).
    pub final_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Shuffling seed. Not serialized: experiment configs derive it from
    /// their master seed.
    #[serde(skip)]
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            final_learning_rate: None,
            batch_size: 64,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0) || !lr.is_finite() || self.learning_rate == 0.0 {
                return bad(format!("final learning rate must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(last) if self.epochs > 1 => {
                let frac = epoch as f64 / (self.epochs - 1) as f64;
                self.learning_rate * (last / self.learning_rate).powf(frac)
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Full-dataset loss after each epoch.
    pub loss_per_epoch: Vec<f64>,
    pub final_loss: f64,
    /// Seconds; the only field that varies between identical runs.
    pub wall_time: f64,
}

impl TrainReport {
    /// CSV `epoch,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, loss) in self.loss_per_epoch.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, fmt_f64(*loss)).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

const EVAL_CHUNK: usize = 2048;

fn check_shapes(params: &NetworkParams, ds: &MemoryWindowDataset) -> Result<()> {
    check_dim("dataset observed dimension", params.d(), ds.d())?;
    check_dim("dataset memory length", params.n_mem(), ds.n_mem())
}

/// Mean over rows of the squared Euclidean one-step error.
pub fn mse_loss(params: &NetworkParams, ds: &MemoryWindowDataset) -> Result<f64> {
    check_shapes(params, ds)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("loss of an empty dataset".into()));
    }
    let mut sse = 0.0;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let pred = params.forward_batch(ds.inputs().slice(s![start..end, ..]))?;
        sse += (&pred - &ds.targets().slice(s![start..end, ..])).iter().map(|r| r * r).sum::<f64>();
        start = end;
    }
    Ok(sse / ds.len() as f64)
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: GradientSet,
    second: GradientSet,
}

impl Adam {
    fn new(params: &NetworkParams, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: GradientSet::zeros_like(params),
            second: GradientSet::zeros_like(params),
        }
    }

    fn update(&mut self, params: &mut NetworkParams, grads: &GradientSet, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..params.weights.len() {
            Zip::from(&mut params.weights[l])
                .and(&mut self.first.weights[l])
                .and(&mut self.second.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| apply(p, m, v, g));
            Zip::from(&mut params.biases[l])
                .and(&mut self.first.biases[l])
                .and(&mut self.second.biases[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| apply(p, m, v, g));
        }
    }
}

/// Runs `epochs * ceil(J / batch_size)` Adam steps. Shuffling draws only
/// from `cfg.seed`, so repeated runs are bitwise identical.
pub fn train_model(
    init: &NetworkParams,
    ds: &MemoryWindowDataset,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    check_shapes(init, ds)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            ds.len()
        )));
    }
    let clock = Instant::now();
    let mut params = init.clone();
    let mut adam = Adam::new(&params, cfg);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let lr = cfg.learning_rate_at(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let inputs = ds.inputs().select(ndarray::Axis(0), batch);
            let targets = ds.targets().select(ndarray::Axis(0), batch);
            let (sse, mut grads) = params.squared_error_gradient(inputs.view(), targets.view())?;
            if !sse.is_finite() {
                return Err(Error::Divergence { step });
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.update(&mut params, &grads, lr);
            step += 1;
        }
        let loss = mse_loss(&params, ds)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        log::debug!("epoch {} loss {loss:.3e} lr {lr:.2e}", epoch + 1);
        losses.push(loss);
    }
    let final_loss = *losses.last().unwrap();
    log::info!("trained {} epochs, final loss {final_loss:.3e}", cfg.epochs);
    Ok((
        params,
        TrainReport {
            loss_per_epoch: losses,
            final_loss,
            wall_time: clock.elapsed().as_secs_f64(),
        },
    ))
}

pub fn save_model(params: &NetworkParams, path: &Path) -> Result<()> {
    params.save(path)
}

pub fn load_model(path: &Path) -> Result<NetworkParams> {
    NetworkParams::load(path)
}
