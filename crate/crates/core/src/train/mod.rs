//! Language-model training for toy configurations.

mod adam;
mod backward;
mod gradcheck;

use std::io::Write;

use rand::Rng as _;

pub use adam::{adam_update, AdamState};
pub use backward::{backward, batch_loss, BatchLoss, GradientSet};
pub use gradcheck::{gradient_check, min_router_gap, GradCheckOptions, GradCheckReport, TensorCheck};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor};

/// One training sequence; `targets[t]` is the token to predict after position
/// `t`, or `None` when that position is not scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl TrainExample {
    /// Next-token prediction at every position of `window[..len-1]`.
    pub fn next_token(window: &[u32]) -> Self {
        let n = window.len() - 1;
        Self {
            tokens: window[..n].to_vec(),
            targets: window[1..].iter().map(|&t| Some(t)).collect(),
        }
    }

    pub fn scored(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Anything that can hand out training sequences.
pub trait ExampleSource {
    fn sample(&mut self, rng: &mut rng::Rng) -> TrainExample;
}

impl<S: ExampleSource + ?Sized> ExampleSource for Box<S> {
    fn sample(&mut self, rng: &mut rng::Rng) -> TrainExample {
        (**self).sample(rng)
    }
}

/// Uniformly random windows of a token stream.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    tokens: Vec<u32>,
    window: usize,
    bos: Option<u32>,
}

impl WindowSampler {
    /// `window` is the number of input tokens; each sample reads `window + 1` tokens.
    pub fn new(tokens: Vec<u32>, window: usize) -> Result<Self> {
        if window == 0 || tokens.len() <= window {
            return Err(Error::NoData(format!(
                "corpus of {} tokens is too short for windows of {window}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            window,
            bos: None,
        })
    }

    /// Windows of `window` corpus tokens fed after `bos`, scoring every one of them.
    pub fn with_bos(mut self, bos: u32) -> Self {
        self.bos = Some(bos);
        self
    }
}

impl ExampleSource for WindowSampler {
    fn sample(&mut self, rng: &mut rng::Rng) -> TrainExample {
        let start = rng.gen_range(0..self.tokens.len() - self.window);
        match self.bos {
            None => TrainExample::next_token(&self.tokens[start..start + self.window + 1]),
            Some(bos) => {
                let w = &self.tokens[start..start + self.window];
                let mut tokens = Vec::with_capacity(w.len());
                tokens.push(bos);
                tokens.extend_from_slice(&w[..w.len() - 1]);
                TrainExample {
                    tokens,
                    targets: w.iter().map(|&t| Some(t)).collect(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Weight of the auxiliary load-balancing loss; 0 disables it.
    pub aux_loss_coef: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate down to 10% over the run.
    pub cosine_decay: bool,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 200,
            seed: 0,
            aux_loss_coef: 0.0,
            warmup_steps: 0,
            cosine_decay: false,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.aux_loss_coef < 0.0 {
            return Err(Error::Config("aux loss coefficient must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.learning_rate;
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        } else if self.cosine_decay && self.steps > self.warmup_steps {
            let progress = (step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64;
            lr *= 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        lr
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<f64> {
    let v = logits.cols();
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    let mut sum = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        if y as usize >= v {
            return Err(Error::InvalidToken { id: y, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
        sum += z.ln() + max - row[y as usize].as_f64();
    }
    Ok(sum / targets.len() as f64)
}

/// Loss after each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_curve<W: Write>(mut w: W, curve: &[LossRecord]) -> Result<()> {
    writeln!(w, "step\tloss")?;
    for r in curve {
        writeln!(w, "{}\t{:.6}", r.step, r.loss)?;
    }
    Ok(())
}

/// Trains in place; see [`train_with`].
pub fn train<T: Scalar, S: ExampleSource>(
    model: &mut TransformerModel<T>,
    source: &mut S,
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    train_with(model, source, config, |_| {})
}

/// Adam training loop. Batches are drawn from the data stream of `config.seed`,
/// so a (model, source, config) triple fully determines the result.
pub fn train_with<T: Scalar, S: ExampleSource, F: FnMut(&LossRecord)>(
    model: &mut TransformerModel<T>,
    source: &mut S,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, Stream::Data);
    let mut state = AdamState::new(model);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<TrainExample> = (0..config.batch_size).map(|_| source.sample(&mut rng)).collect();
        let (loss, mut grads) = match backward(model, &batch, config.aux_loss_coef) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let total = loss.total();
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        if let Some(max) = config.clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                grads.scale(T::of(max / norm));
            }
        }
        state.step(model, &grads, config, config.lr_at(step));
        let record = LossRecord { step, loss: total };
        on_step(&record);
        curve.push(record);
    }
    Ok(curve)
}
