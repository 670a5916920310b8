//! Analytic gradients for the whole model.
//!
//! Top-k selection is treated as locally constant: gradients reach the router
//! only through the softmax over the selected logits, and experts only
//! through the tokens routed to them.

use crate::error::{Error, Result};
use crate::model::{AttentionCache, AttentionWeights, ForwardState, MoeCache, TransformerModel};
use crate::moe::MoELayer;
use crate::tensor::{dot, gemm_nt_acc, gemm_tn_acc, rope_row, silu_grad, silu_scalar, Scalar, Tensor};

use super::TrainExample;

/// One gradient tensor per model parameter, laid out like the model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    grads: TransformerModel<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &TransformerModel<T>) -> Self {
        let tensors = model.params().into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            grads: TransformerModel::from_params(model.config, tensors).expect("shapes copied from model"),
        }
    }

    /// Gradient tensors in the model's parameter order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.grads.params()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.grads.params_mut()
    }

    /// Structured view: the gradient of `model.layers[l].moe.experts[e].w1`
    /// is `grads.as_model().layers[l].moe.experts[e].w1`.
    pub fn as_model(&self) -> &TransformerModel<T> {
        &self.grads
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    /// Mean cross-entropy over every scored position of the batch.
    pub cross_entropy: f64,
    /// Auxiliary load-balancing term, averaged over sequences (zero when disabled).
    pub aux: f64,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.aux
    }
}

fn scored_positions(batch: &[TrainExample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for ex in batch {
        if ex.targets.len() != ex.tokens.len() {
            return Err(Error::Input(format!(
                "{} targets for {} tokens",
                ex.targets.len(),
                ex.tokens.len()
            )));
        }
    }
    let n: usize = batch.iter().map(TrainExample::scored).sum();
    if n == 0 {
        return Err(Error::Input("batch has no scored positions".into()));
    }
    Ok(n)
}

/// Loss of a batch without gradients. Uses exactly the arithmetic of [`backward`].
pub fn batch_loss<T: Scalar>(model: &TransformerModel<T>, batch: &[TrainExample], aux_coef: f64) -> Result<BatchLoss> {
    let total = scored_positions(batch)?;
    let mut ce = 0.0;
    let mut aux = 0.0;
    for ex in batch {
        let state = model.run(&ex.tokens, aux_coef != 0.0)?;
        ce += head_loss(model, &state, ex, None, None)?;
        if aux_coef != 0.0 {
            for (block, cache) in model.layers.iter().zip(&state.blocks) {
                aux += aux_terms(&block.moe, &cache.moe, state.seq, aux_coef, None);
            }
        }
    }
    Ok(BatchLoss {
        cross_entropy: ce / total as f64,
        aux: aux / batch.len() as f64,
    })
}

/// Loss and analytic gradients of a batch.
pub fn backward<T: Scalar>(
    model: &TransformerModel<T>,
    batch: &[TrainExample],
    aux_coef: f64,
) -> Result<(BatchLoss, GradientSet<T>)> {
    let total = scored_positions(batch)?;
    let mut grads = GradientSet::zeros_like(model);
    let mut ce = 0.0;
    let mut aux = 0.0;
    let ce_scale = T::of(1.0 / total as f64);
    let aux_scale = aux_coef / batch.len() as f64;
    for ex in batch {
        let (c, a) = accumulate(model, ex, ce_scale, aux_coef, aux_scale, &mut grads.grads)?;
        ce += c;
        aux += a;
    }
    Ok((
        BatchLoss {
            cross_entropy: ce / total as f64,
            aux: aux / batch.len() as f64,
        },
        grads,
    ))
}

/// Summed cross-entropy of the scored positions; optionally writes head gradients.
fn head_loss<T: Scalar>(
    model: &TransformerModel<T>,
    state: &ForwardState<T>,
    ex: &TrainExample,
    scale: Option<T>,
    mut grads: Option<(&mut Tensor<T>, &mut [T])>,
) -> Result<f64> {
    let d = model.config.dim;
    let v = model.config.vocab_size;
    let mut sum = 0.0;
    for (t, target) in ex.targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let y = y as usize;
        if y >= v {
            return Err(Error::InvalidToken {
                id: y as u32,
                vocab: v,
            });
        }
        let h = &state.hidden[t * d..(t + 1) * d];
        let mut p = model.head_row(h);
        let max = p.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted_target = p[y] - max;
        let mut z = T::zero();
        for x in p.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        sum += (z.ln() - shifted_target).as_f64();
        if let (Some(scale), Some((d_out, d_hidden))) = (scale, grads.as_mut()) {
            for x in p.iter_mut() {
                *x /= z;
            }
            p[y] -= T::one();
            for x in p.iter_mut() {
                *x *= scale;
            }
            gemm_tn_acc(h, &p, d_out.data_mut(), d, 1, v);
            gemm_nt_acc(&p, model.output.data(), &mut d_hidden[t * d..(t + 1) * d], 1, v, d);
        }
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok(sum)
}

/// Auxiliary load-balancing loss `coef · n · Σ_i f_i · P_i` of one layer, where
/// `f_i` is the share of assignment events routed to expert `i` and `P_i` the
/// mean full-softmax router probability. When `d_logits` is given, adds
/// `grad_scale`-weighted gradients with `f` held constant.
fn aux_terms<T: Scalar>(
    moe: &MoELayer<T>,
    cache: &MoeCache<T>,
    seq: usize,
    coef: f64,
    grad: Option<(f64, &mut [T])>,
) -> f64 {
    let n = moe.num_experts();
    let events = (seq * moe.top_k) as f64;
    let f: Vec<f64> = cache.plan.per_expert.iter().map(|a| a.len() as f64 / events).collect();
    let mut mean_p = vec![0.0; n];
    let mut probs = Vec::with_capacity(seq * n);
    for row in cache.logits.chunks_exact(n) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (i, x) in e.iter().enumerate() {
            mean_p[i] += x / z / seq as f64;
            probs.push(x / z);
        }
    }
    let loss = coef * n as f64 * f.iter().zip(&mean_p).map(|(a, b)| a * b).sum::<f64>();
    if let Some((grad_scale, d_logits)) = grad {
        let factor = grad_scale * n as f64 / seq as f64;
        for (t, p) in probs.chunks_exact(n).enumerate() {
            let pf: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
            for j in 0..n {
                d_logits[t * n + j] += T::of(factor * p[j] * (f[j] - pf));
            }
        }
    }
    loss
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Backward of row-wise RMS normalization. Accumulates the gain gradient, returns `dx`.
fn rmsnorm_backward<T: Scalar>(x: &[T], gain: &[T], inv_rms: &[T], dy: &[T], d_gain: &mut [T]) -> Vec<T> {
    let d = gain.len();
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    for (r, &inv) in inv_rms.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut proj = T::zero();
        for i in 0..d {
            d_gain[i] += dyr[i] * xr[i] * inv;
            proj += dyr[i] * gain[i] * xr[i];
        }
        let c = inv * inv * inv * proj / dn;
        for (i, out) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *out = inv * dyr[i] * gain[i] - xr[i] * c;
        }
    }
    dx
}

fn attention_backward<T: Scalar>(
    model: &TransformerModel<T>,
    w: &AttentionWeights<T>,
    cache: &AttentionCache<T>,
    x: &[T],
    d_out: &[T],
    g: &mut AttentionWeights<T>,
) -> Vec<T> {
    let cfg = &model.config;
    let (d, qd, kvd, hd) = (cfg.dim, cfg.q_dim(), cfg.kv_dim(), cfg.head_dim);
    let seq = x.len() / d;
    let group = cfg.n_heads / cfg.n_kv_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();

    gemm_tn_acc(&cache.heads, d_out, g.wo.data_mut(), qd, seq, d);
    let mut d_heads = vec![T::zero(); seq * qd];
    gemm_nt_acc(d_out, w.wo.data(), &mut d_heads, seq, d, qd);

    let mut dq = vec![T::zero(); seq * qd];
    let mut dk = vec![T::zero(); seq * kvd];
    let mut dv = vec![T::zero(); seq * kvd];
    let mut dp = vec![T::zero(); seq];
    for h in 0..cfg.n_heads {
        let kv = h / group;
        for i in 0..seq {
            let p = &cache.probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
            let d_o = &d_heads[i * qd + h * hd..i * qd + (h + 1) * hd];
            let mut weighted = T::zero();
            for j in 0..=i {
                let vj = &cache.v[j * kvd + kv * hd..j * kvd + (kv + 1) * hd];
                dp[j] = dot(d_o, vj);
                weighted += p[j] * dp[j];
                let dvj = &mut dv[j * kvd + kv * hd..j * kvd + (kv + 1) * hd];
                for (a, &b) in dvj.iter_mut().zip(d_o) {
                    *a += p[j] * b;
                }
            }
            let qi = &cache.q[i * qd + h * hd..i * qd + (h + 1) * hd];
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = &cache.k[j * kvd + kv * hd..j * kvd + (kv + 1) * hd];
                let dqi = &mut dq[i * qd + h * hd..i * qd + (h + 1) * hd];
                for (a, &b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let dkj = &mut dk[j * kvd + kv * hd..j * kvd + (kv + 1) * hd];
                for (a, &b) in dkj.iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }
    for s in 0..seq {
        rope_row(&mut dq[s * qd..(s + 1) * qd], hd, s, true);
        rope_row(&mut dk[s * kvd..(s + 1) * kvd], hd, s, true);
    }
    gemm_tn_acc(x, &dq, g.wq.data_mut(), d, seq, qd);
    gemm_tn_acc(x, &dk, g.wk.data_mut(), d, seq, kvd);
    gemm_tn_acc(x, &dv, g.wv.data_mut(), d, seq, kvd);
    let mut dx = vec![T::zero(); seq * d];
    gemm_nt_acc(&dq, w.wq.data(), &mut dx, seq, qd, d);
    gemm_nt_acc(&dk, w.wk.data(), &mut dx, seq, kvd, d);
    gemm_nt_acc(&dv, w.wv.data(), &mut dx, seq, kvd, d);
    dx
}

fn moe_backward<T: Scalar>(
    moe: &MoELayer<T>,
    cache: &MoeCache<T>,
    x: &[T],
    dy: &[T],
    aux: Option<(f64, f64)>,
    g: &mut MoELayer<T>,
) -> (Vec<T>, f64) {
    let (n, k, d) = (moe.num_experts(), moe.top_k, moe.dim());
    let seq = x.len() / d;
    let mut dx = vec![T::zero(); seq * d];
    let mut d_gate = vec![T::zero(); seq * k];
    let mut gathered = Vec::new();
    let mut d_block = Vec::new();
    for (e, assigned) in cache.plan.per_expert.iter().enumerate() {
        let Some(act) = cache.acts[e].as_ref() else { continue };
        let expert = &moe.experts[e];
        let ge = &mut g.experts[e];
        let m = assigned.len();
        let h = expert.hidden_dim();
        gathered.clear();
        d_block.clear();
        for (i, a) in assigned.iter().enumerate() {
            let dyt = &dy[a.token * d..(a.token + 1) * d];
            gathered.extend_from_slice(&x[a.token * d..(a.token + 1) * d]);
            d_gate[a.token * k + a.rank - 1] = dot(dyt, &act.out[i * d..(i + 1) * d]);
            let w = T::of(a.weight);
            d_block.extend(dyt.iter().map(|&v| w * v));
        }
        gemm_tn_acc(&act.hidden, &d_block, ge.w2.data_mut(), h, m, d);
        let mut d_hidden = vec![T::zero(); m * h];
        gemm_nt_acc(&d_block, expert.w2.data(), &mut d_hidden, m, d, h);
        let mut da = vec![T::zero(); m * h];
        let mut db = vec![T::zero(); m * h];
        for i in 0..m * h {
            let (a, b) = (act.pre_gate[i], act.pre_up[i]);
            da[i] = d_hidden[i] * b * silu_grad(a);
            db[i] = d_hidden[i] * silu_scalar(a);
        }
        gemm_tn_acc(&gathered, &da, ge.w1.data_mut(), d, m, h);
        gemm_tn_acc(&gathered, &db, ge.w3.data_mut(), d, m, h);
        let mut d_gathered = vec![T::zero(); m * d];
        gemm_nt_acc(&da, expert.w1.data(), &mut d_gathered, m, h, d);
        gemm_nt_acc(&db, expert.w3.data(), &mut d_gathered, m, h, d);
        for (a, row) in assigned.iter().zip(d_gathered.chunks_exact(d)) {
            add_into(&mut dx[a.token * d..(a.token + 1) * d], row);
        }
    }

    // Softmax over the selected logits only; unselected logits get zero gradient.
    let mut d_logits = vec![T::zero(); seq * n];
    for (t, decision) in cache.decisions.iter().enumerate() {
        let dg = &d_gate[t * k..(t + 1) * k];
        let mean: T = decision
            .choices
            .iter()
            .zip(dg)
            .map(|(c, &g)| T::of(c.weight) * g)
            .sum();
        for (c, &g) in decision.choices.iter().zip(dg) {
            d_logits[t * n + c.expert] += T::of(c.weight) * (g - mean);
        }
    }
    let aux_loss = match aux {
        Some((coef, grad_scale)) => aux_terms(moe, cache, seq, coef, Some((grad_scale, &mut d_logits))),
        None => 0.0,
    };
    gemm_tn_acc(x, &d_logits, g.router.w_g.data_mut(), d, seq, n);
    gemm_nt_acc(&d_logits, moe.router.w_g.data(), &mut dx, seq, n, d);
    (dx, aux_loss)
}

fn accumulate<T: Scalar>(
    model: &TransformerModel<T>,
    ex: &TrainExample,
    ce_scale: T,
    aux_coef: f64,
    aux_scale: f64,
    grads: &mut TransformerModel<T>,
) -> Result<(f64, f64)> {
    let state = model.run(&ex.tokens, true)?;
    let d = model.config.dim;
    let mut d_hidden = vec![T::zero(); state.seq * d];
    let ce = head_loss(
        model,
        &state,
        ex,
        Some(ce_scale),
        Some((&mut grads.output, &mut d_hidden)),
    )?;
    let mut dx = rmsnorm_backward(
        &state.x_final,
        model.final_norm.data(),
        &state.final_inv_rms,
        &d_hidden,
        grads.final_norm.data_mut(),
    );
    let aux = (aux_coef != 0.0).then_some((aux_coef, aux_scale));
    let mut aux_loss = 0.0;
    for l in (0..model.layers.len()).rev() {
        let block = &model.layers[l];
        let cache = &state.blocks[l];
        let gb = &mut grads.layers[l];

        let (d_ffn_in, a) = moe_backward(&block.moe, &cache.moe, &cache.ffn_in, &dx, aux, &mut gb.moe);
        aux_loss += a;
        let d_mid = rmsnorm_backward(
            &cache.x_mid,
            block.ffn_norm.data(),
            &cache.ffn_inv_rms,
            &d_ffn_in,
            gb.ffn_norm.data_mut(),
        );
        add_into(&mut dx, &d_mid);

        let d_attn_in = attention_backward(model, &block.attention, &cache.attn, &cache.attn_in, &dx, &mut gb.attention);
        let d_in = rmsnorm_backward(
            &cache.x_in,
            block.attn_norm.data(),
            &cache.attn_inv_rms,
            &d_attn_in,
            gb.attn_norm.data_mut(),
        );
        add_into(&mut dx, &d_in);
    }
    for (t, &tok) in ex.tokens.iter().enumerate() {
        add_into(grads.embedding.row_mut(tok as usize), &dx[t * d..(t + 1) * d]);
    }
    Ok((ce, aux_loss))
}
