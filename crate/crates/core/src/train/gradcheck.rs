//! Finite-difference audit of the analytic gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::moe::top_k_indices;
use crate::rng::{self, Stream};
use crate::tensor::Scalar;

use super::{backward, batch_loss, TrainExample};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding compare on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    pub aux_loss_coef: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-6,
            max_per_tensor: None,
            seed: 0,
            aux_loss_coef: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation changed an expert selection.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub max_abs_gradient: f64,
    /// Every analytic entry of this tensor is exactly zero.
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub router_gap: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Smallest gap between the k-th and (k+1)-th router logit over every token
/// and layer of the batch (infinite when k equals the number of experts).
pub fn min_router_gap<T: Scalar>(model: &TransformerModel<T>, batch: &[TrainExample]) -> Result<f64> {
    let mut gap = f64::INFINITY;
    let k = model.config.top_k_experts;
    let n = model.config.num_experts;
    if k == n {
        return Ok(gap);
    }
    for ex in batch {
        let state = model.run(&ex.tokens, true)?;
        for block in &state.blocks {
            for row in block.moe.logits.chunks_exact(n) {
                let order = top_k_indices(row, k + 1);
                gap = gap.min((row[order[k - 1]] - row[order[k]]).as_f64());
            }
        }
    }
    Ok(gap)
}

fn expert_sets(model: &TransformerModel<f64>, batch: &[TrainExample]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for ex in batch {
        let state = model.run(&ex.tokens, false)?;
        for layer in &state.routing {
            for d in layer {
                let mut s: Vec<usize> = d.experts().collect();
                s.sort_unstable();
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Compares analytic gradients with fourth-order central differences in double precision.
pub fn gradient_check(
    model: &TransformerModel<f64>,
    batch: &[TrainExample],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let router_gap = min_router_gap(model, batch)?;
    let (_, grads) = backward(model, batch, opts.aux_loss_coef)?;
    let base_sets = expert_sets(model, batch)?;
    let names = model.param_names();
    let mut probe = model.clone();
    let mut rng = rng::stream(opts.seed, Stream::Eval);
    let mut tensors = Vec::new();
    for (ti, g) in grads.tensors().into_iter().enumerate() {
        let len = g.len();
        let coords: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut check = TensorCheck {
            name: names[ti].clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            max_abs_gradient: g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
            all_zero: g.data().iter().all(|&v| v == 0.0),
        };
        for &c in &coords {
            let orig = probe.params()[ti].data()[c];
            let mut eval = |value: f64| -> Result<(f64, bool)> {
                probe.params_mut()[ti].data_mut()[c] = value;
                let loss = batch_loss(&probe, batch, opts.aux_loss_coef)?.total();
                let same = expert_sets(&probe, batch)? == base_sets;
                Ok((loss, same))
            };
            let h = opts.step;
            let mut f = [0.0; 4];
            let mut same = true;
            for (slot, offset) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                let (loss, s) = eval(orig + offset * h)?;
                *slot = loss;
                same &= s;
            }
            probe.params_mut()[ti].data_mut()[c] = orig;
            if !same {
                check.skipped += 1;
                continue;
            }
            // Five-point stencil.
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
            let analytic = g.data()[c];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let err = (analytic - numeric).abs() / denom;
            check.checked += 1;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = c;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: opts.tolerance,
        router_gap,
    })
}
