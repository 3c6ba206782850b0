use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{inertia_sum, laplacian_step, rgb_l1_sum, velocity_reg_sum, LossBreakdown, PixelBatch};
use crate::networks::BoundVelocity;

use super::checkpoint::{Checkpoint, RngState, FORMAT_VERSION};
use super::{LayeredVideoModel, Regime, TrainConfig, VideoClip};

/// First line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub regime: Regime,
    pub dt: f64,
    pub lambda_v: f64,
    pub lambda_i: f64,
    pub alpha: f64,
    pub num_layers: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_rgb: f64,
    pub loss_v: f64,
    pub loss_i: f64,
    pub wall_ms: u64,
}

/// Training state between epochs. Everything needed to continue lives here,
/// so a [`Checkpoint`] taken between epochs resumes bit-identically.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: LayeredVideoModel,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    names: Vec<String>,
    started: Instant,
}

pub struct TrainOutcome {
    pub model: LayeredVideoModel,
    pub log: Vec<LogRecord>,
    /// Mean total loss of each epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep the sampling stream apart from the one used for initialization.
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(clip: &VideoClip, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = LayeredVideoModel::new(config.model_spec(), clip.meta.clone(), config.seed)?;
        let adam = AdamState::new(config.adam, model.params.tensors());
        let names = model.params.names().to_vec();
        Ok(Self {
            rng: training_rng(config.seed),
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            names,
            started: Instant::now(),
        })
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let names = ckpt.model.params.names().to_vec();
        Ok(Self {
            rng: ckpt.rng_state.restore(),
            config: ckpt.config,
            model: ckpt.model,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            step: ckpt.step,
            names,
            started: Instant::now(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_state: RngState::capture(&self.rng),
            adam: self.adam.clone(),
        }
    }

    pub fn header(&self) -> LogHeader {
        let c = &self.config;
        LogHeader {
            regime: c.regime,
            dt: c.dt,
            lambda_v: c.lambda_v,
            lambda_i: c.lambda_i,
            alpha: c.alpha,
            num_layers: c.num_layers,
            epochs: c.epochs,
            batch_size: c.batch_size,
            gamma: c.gamma,
            seed: c.seed,
            num_frames: self.model.meta.frame_times.len(),
            width: self.model.meta.width,
            height: self.model.meta.height,
        }
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        if clip.meta != self.model.meta {
            return Err(Error::invalid("clip does not match the model it is being trained on"));
        }
        Ok(())
    }

    /// Batch for sample indices `frame · pixels + pixel`.
    pub fn gather(clip: &VideoClip, indices: &[usize]) -> PixelBatch {
        let grid = clip.grid();
        let pixels = clip.num_pixels();
        let mut batch = PixelBatch { coords: Vec::with_capacity(indices.len()), target_rgb: Vec::with_capacity(indices.len()) };
        for &i in indices {
            let (f, p) = (i / pixels, i % pixels);
            let (x, y) = (p % grid.width, p / grid.width);
            let (u, v) = grid.to_normalized(x as f64, y as f64);
            batch.coords.push([u, v, clip.normalized_times[f]]);
            batch.target_rgb.push(clip.frames[f].pixel(x, y));
        }
        batch
    }

    /// Loss breakdown and parameter gradients for one batch, accumulated over
    /// fixed-size chunks in a fixed order.
    pub fn loss_and_gradients(&self, batch: &PixelBatch, inertia_starts: &[[f64; 2]]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let model = &self.model;
        let w = self.config.weights();
        let n = batch.len() as f64;
        let layers = model.num_layers() as f64;
        let fd_h = laplacian_step(model);
        let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut rgb, mut vel, mut inertia) = (0.0, 0.0, 0.0);

        let accumulate = |tape: &Tape, loss: &<Tape as Graph>::Value, params: &[<Tape as Graph>::Value], grads: &mut Vec<Tensor>| -> Result<()> {
            let g = tape.backward(loss)?;
            for (acc, p) in grads.iter_mut().zip(params) {
                acc.add_assign(&g.wrt(p)?);
            }
            Ok(())
        };

        let rows = self.config.chunk_rows;
        for (coords, targets) in batch.coords.chunks(rows).zip(batch.target_rgb.chunks(rows)) {
            let sub = PixelBatch { coords: coords.to_vec(), target_rgb: targets.to_vec() };
            let mut tape = Tape::new();
            let params = model.params.bind(&mut tape);
            let rgb_sum = rgb_l1_sum(&mut tape, model, &params, &sub.groups())?;
            rgb += tape.value(&rgb_sum).item();
            let mut loss = tape.scale(&rgb_sum, 1.0 / n)?;
            if w.lambda_v > 0.0 {
                let fields: Vec<_> = model.velocity_nets.iter().map(|net| BoundVelocity { net, params: &params }).collect();
                let v_sum = velocity_reg_sum(&mut tape, &fields, &Tensor::from_rows(coords), w.alpha, fd_h)?;
                vel += tape.value(&v_sum).item();
                let weighted = tape.scale(&v_sum, w.lambda_v / (n * layers))?;
                loss = tape.add(&loss, &weighted)?;
            }
            accumulate(&tape, &loss, &params, &mut grads)?;
        }

        let m = inertia_starts.len() as f64;
        if w.lambda_i > 0.0 && !inertia_starts.is_empty() {
            for starts in inertia_starts.chunks(rows) {
                let mut tape = Tape::new();
                let params = model.params.bind(&mut tape);
                let fields: Vec<_> = model.velocity_nets.iter().map(|net| BoundVelocity { net, params: &params }).collect();
                let i_sum = inertia_sum(&mut tape, &fields, &Tensor::from_rows(starts), model.integrator.dt)?;
                inertia += tape.value(&i_sum).item();
                let loss = tape.scale(&i_sum, w.lambda_i / (m * layers))?;
                accumulate(&tape, &loss, &params, &mut grads)?;
            }
        }

        let breakdown = LossBreakdown::combine(
            rgb / n,
            if w.lambda_v > 0.0 { vel / (n * layers) } else { 0.0 },
            if inertia_starts.is_empty() { 0.0 } else { inertia / (m * layers) },
            &w,
        );
        Ok((breakdown, grads))
    }

    fn diverged(&self) -> Error {
        Error::Diverged { step: self.step + 1, epoch: self.epoch + 1 }
    }

    /// One optimizer step on the given sample indices. On failure the
    /// trainer, sampling stream included, is left as it was before the step.
    pub fn train_step(&mut self, clip: &VideoClip, indices: &[usize]) -> Result<LossBreakdown> {
        let rng = self.rng.clone();
        let result = self.try_step(clip, indices);
        if result.is_err() {
            self.rng = rng;
        }
        result
    }

    fn try_step(&mut self, clip: &VideoClip, indices: &[usize]) -> Result<LossBreakdown> {
        let batch = Self::gather(clip, indices);
        let m = batch.len().min(self.config.inertia_samples);
        let starts: Vec<[f64; 2]> = if self.config.lambda_i > 0.0 {
            index::sample(&mut self.rng, batch.len(), m).into_iter().map(|r| [batch.coords[r][0], batch.coords[r][1]]).collect()
        } else {
            Vec::new()
        };
        let (loss, grads) = match self.loss_and_gradients(&batch, &starts) {
            Ok(r) => r,
            Err(Error::Unstable { .. }) | Err(Error::NonFinite { .. }) => return Err(self.diverged()),
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(self.diverged());
        }
        self.adam.step(&self.names, self.model.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs one epoch: a fresh shuffle of every (pixel, frame) pair, consumed
    /// in batches. Returns the batch-size-weighted mean total loss.
    pub fn run_epoch(&mut self, clip: &VideoClip, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<f64> {
        self.check_clip(clip)?;
        let mut order: Vec<usize> = (0..clip.num_samples()).collect();
        order.shuffle(&mut self.rng);
        let mut weighted = 0.0;
        for indices in order.chunks(self.config.batch_size) {
            let loss = self.train_step(clip, indices)?;
            weighted += loss.total * indices.len() as f64;
            if self.step % self.config.log_every == 0 {
                sink(&LogRecord {
                    step: self.step,
                    epoch: self.epoch + 1,
                    loss_total: loss.total,
                    loss_rgb: loss.rgb,
                    loss_v: loss.velocity,
                    loss_i: loss.inertia,
                    wall_ms: self.started.elapsed().as_millis() as u64,
                })?;
            }
        }
        self.epoch += 1;
        Ok(weighted / order.len() as f64)
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn run(&mut self, clip: &VideoClip, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.epoch < self.config.epochs {
            losses.push(self.run_epoch(clip, sink)?);
            log::info!("epoch {} loss {:.6}", self.epoch, losses.last().unwrap());
        }
        Ok(losses)
    }
}

/// Trains a fresh model on `clip` and returns it with the in-memory log.
pub fn train(clip: &VideoClip, config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(clip, config)?;
    let mut log = Vec::new();
    let epoch_losses = trainer.run(clip, &mut |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutcome { model: trainer.model, log, epoch_losses })
}
