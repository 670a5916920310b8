//! Decoder-only transformer with a sparse MoE layer in every block.
//!
//! Blocks are pre-norm residual: `x += attention(rmsnorm(x))`, then
//! `x += moe(rmsnorm(x))`. Attention is causal grouped-query attention with
//! rotary embeddings over the full context (no sliding window). Embedding and
//! output head are separate matrices.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::moe::{build_dispatch_plan, random_matrix, DispatchPlan, GateDecision, MoELayer, SwigluActivations};
use crate::tensor::{dot, gemm, rmsnorm_row, rope_row, softmax_row, Scalar, Tensor, RMS_EPS};
use crate::trace::{RoutingTrace, TraceDocument, TraceHeader};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f32> {
    /// `[dim × n_heads·head_dim]`
    pub wq: Tensor<T>,
    /// `[dim × n_kv_heads·head_dim]`
    pub wk: Tensor<T>,
    /// `[dim × n_kv_heads·head_dim]`
    pub wv: Tensor<T>,
    /// `[n_heads·head_dim × dim]`
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T = f32> {
    pub attn_norm: Tensor<T>,
    pub attention: AttentionWeights<T>,
    pub ffn_norm: Tensor<T>,
    pub moe: MoELayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T = f32> {
    pub config: ModelConfig,
    /// `[vocab × dim]`
    pub embedding: Tensor<T>,
    pub layers: Vec<TransformerBlock<T>>,
    pub final_norm: Tensor<T>,
    /// `[dim × vocab]`
    pub output: Tensor<T>,
}

/// Saved activations of one attention call.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<T> {
    /// Rotated queries `[seq × q_dim]`.
    pub q: Vec<T>,
    /// Rotated keys `[seq × kv_dim]`.
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Causal attention probabilities `[n_heads × seq × seq]`; entries above the diagonal are zero.
    pub probs: Vec<T>,
    /// Concatenated head outputs before `wo`, `[seq × q_dim]`.
    pub heads: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct MoeCache<T> {
    pub logits: Vec<T>,
    pub decisions: Vec<GateDecision>,
    pub plan: DispatchPlan,
    /// Expert activations over the gathered rows of each expert's block.
    pub acts: Vec<Option<SwigluActivations<T>>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    pub x_in: Vec<T>,
    pub attn_in: Vec<T>,
    pub attn_inv_rms: Vec<T>,
    pub attn: AttentionCache<T>,
    pub x_mid: Vec<T>,
    pub ffn_in: Vec<T>,
    pub ffn_inv_rms: Vec<T>,
    pub moe: MoeCache<T>,
}

/// Everything a forward pass produces; caches are only populated on request.
#[derive(Debug, Clone)]
pub(crate) struct ForwardState<T> {
    pub seq: usize,
    pub blocks: Vec<BlockCache<T>>,
    /// Residual stream entering the final norm.
    pub x_final: Vec<T>,
    pub final_inv_rms: Vec<T>,
    /// Normalized hidden states `[seq × dim]` fed to the output head.
    pub hidden: Vec<T>,
    /// Routing decisions `[layer][token]`.
    pub routing: Vec<Vec<GateDecision>>,
}

impl<T: Scalar> AttentionWeights<T> {
    fn random<R: Rng>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        Self {
            wq: random_matrix(cfg.dim, cfg.q_dim(), std, rng),
            wk: random_matrix(cfg.dim, cfg.kv_dim(), std, rng),
            wv: random_matrix(cfg.dim, cfg.kv_dim(), std, rng),
            wo: random_matrix(cfg.q_dim(), cfg.dim, std, rng),
        }
    }

    /// Causal grouped-query attention over `seq` rows of `x`, positions `0..seq`.
    pub(crate) fn forward(&self, cfg: &ModelConfig, x: &[T], seq: usize) -> Result<(Vec<T>, AttentionCache<T>)> {
        let (d, qd, kvd, hd) = (cfg.dim, cfg.q_dim(), cfg.kv_dim(), cfg.head_dim);
        let mut q = gemm(x, self.wq.data(), seq, d, qd);
        let mut k = gemm(x, self.wk.data(), seq, d, kvd);
        let v = gemm(x, self.wv.data(), seq, d, kvd);
        for s in 0..seq {
            rope_row(&mut q[s * qd..(s + 1) * qd], hd, s, false);
            rope_row(&mut k[s * kvd..(s + 1) * kvd], hd, s, false);
        }
        let group = cfg.n_heads / cfg.n_kv_heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut probs = vec![T::zero(); cfg.n_heads * seq * seq];
        let mut heads = vec![T::zero(); seq * qd];
        for h in 0..cfg.n_heads {
            let g = h / group;
            for i in 0..seq {
                let qi = &q[i * qd + h * hd..i * qd + (h + 1) * hd];
                let row = &mut probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = dot(qi, &k[j * kvd + g * hd..j * kvd + (g + 1) * hd]) * scale;
                }
                softmax_row(row).map_err(|_| Error::NonFinite { op: "attention" })?;
                let out = &mut heads[i * qd + h * hd..i * qd + (h + 1) * hd];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[j * kvd + g * hd..j * kvd + (g + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let out = gemm(&heads, self.wo.data(), seq, qd, d);
        Ok((out, AttentionCache { q, k, v, probs, heads }))
    }
}

fn norm_rows<T: Scalar>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        inv.push(rmsnorm_row(&x[r * d..(r + 1) * d], gain, T::of(RMS_EPS), &mut out[r * d..(r + 1) * d]));
    }
    (out, inv)
}

impl<T: Scalar> TransformerModel<T> {
    /// Normal(0, 0.02) matrices and unit norm gains.
    pub fn random<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::random_with_std(config, INIT_STD, rng)
    }

    pub fn random_with_std<R: Rng>(config: ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embedding = random_matrix(config.vocab_size, d, std, rng);
        let layers = (0..config.n_layers)
            .map(|_| {
                let attention = AttentionWeights::random(&config, std, rng);
                let moe = MoELayer::random(d, config.hidden_dim, config.num_experts, config.top_k_experts, std, rng)?;
                Ok(TransformerBlock {
                    attn_norm: Tensor::filled(&[d], T::one()),
                    attention,
                    ffn_norm: Tensor::filled(&[d], T::one()),
                    moe,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = random_matrix(d, config.vocab_size, std, rng);
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm: Tensor::filled(&[d], T::one()),
            output,
        })
    }

    /// Every parameter tensor in checkpoint order: embedding; per layer attention norm,
    /// wq, wk, wv, wo, ffn norm, router, then w1, w3, w2 of each expert; final norm; output head.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.embedding];
        for b in &self.layers {
            v.extend([
                &b.attn_norm,
                &b.attention.wq,
                &b.attention.wk,
                &b.attention.wv,
                &b.attention.wo,
                &b.ffn_norm,
                &b.moe.router.w_g,
            ]);
            for e in &b.moe.experts {
                v.extend([&e.w1, &e.w3, &e.w2]);
            }
        }
        v.extend([&self.final_norm, &self.output]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.embedding];
        for b in &mut self.layers {
            v.extend([
                &mut b.attn_norm,
                &mut b.attention.wq,
                &mut b.attention.wk,
                &mut b.attention.wv,
                &mut b.attention.wo,
                &mut b.ffn_norm,
                &mut b.moe.router.w_g,
            ]);
            for e in &mut b.moe.experts {
                v.extend([&mut e.w1, &mut e.w3, &mut e.w2]);
            }
        }
        v.extend([&mut self.final_norm, &mut self.output]);
        v
    }

    /// Human-readable names matching [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["embedding".to_string()];
        for (l, b) in self.layers.iter().enumerate() {
            for n in ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "router"] {
                v.push(format!("layers.{l}.{n}"));
            }
            for e in 0..b.moe.experts.len() {
                for n in ["w1", "w3", "w2"] {
                    v.push(format!("layers.{l}.experts.{e}.{n}"));
                }
            }
        }
        v.push("final_norm".into());
        v.push("output".into());
        v
    }

    /// Expected shapes of [`Self::params`] for a config.
    pub fn param_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let d = config.dim;
        let mut v = vec![vec![config.vocab_size, d]];
        for _ in 0..config.n_layers {
            v.extend([
                vec![d],
                vec![d, config.q_dim()],
                vec![d, config.kv_dim()],
                vec![d, config.kv_dim()],
                vec![config.q_dim(), d],
                vec![d],
                vec![d, config.num_experts],
            ]);
            for _ in 0..config.num_experts {
                v.extend([
                    vec![d, config.hidden_dim],
                    vec![d, config.hidden_dim],
                    vec![config.hidden_dim, d],
                ]);
            }
        }
        v.extend([vec![d], vec![d, config.vocab_size]]);
        v
    }

    /// Rebuilds a model from tensors in [`Self::params`] order.
    pub fn from_params(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked above");
        let embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = next();
            let attention = AttentionWeights {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            };
            let ffn_norm = next();
            let router = crate::moe::RouterWeights::new(next())?;
            let experts = (0..config.num_experts)
                .map(|_| crate::moe::ExpertWeights::new(next(), next(), next()))
                .collect::<Result<Vec<_>>>()?;
            layers.push(TransformerBlock {
                attn_norm,
                attention,
                ffn_norm,
                moe: MoELayer::new(router, experts, config.top_k_experts)?,
            });
        }
        let final_norm = next();
        let output = next();
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            output,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        let tensors = self.params().into_iter().map(Tensor::cast).collect();
        TransformerModel::from_params(self.config, tensors).expect("same config and shapes")
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the blocks; keeps per-block activations when `keep_cache` is set.
    pub(crate) fn run(&self, tokens: &[u32], keep_cache: bool) -> Result<ForwardState<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (seq, d) = (tokens.len(), cfg.dim);
        let mut x = Vec::with_capacity(seq * d);
        for &t in tokens {
            x.extend_from_slice(self.embedding.row(t as usize));
        }
        let mut blocks = Vec::new();
        let mut routing = Vec::with_capacity(cfg.n_layers);
        for block in &self.layers {
            let (attn_in, attn_inv_rms) = norm_rows(&x, block.attn_norm.data(), d);
            let (attn_out, attn) = block.attention.forward(cfg, &attn_in, seq)?;
            let x_mid: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();

            let (ffn_in, ffn_inv_rms) = norm_rows(&x_mid, block.ffn_norm.data(), d);
            let moe = &block.moe;
            let logits = moe.router_logits(&ffn_in, seq);
            let decisions = logits
                .chunks_exact(moe.num_experts())
                .map(|l| crate::moe::gate_from_logits(l, moe.top_k))
                .collect::<Result<Vec<_>>>()?;
            let plan = build_dispatch_plan(&decisions, moe.num_experts())?;
            let mut acts = Vec::with_capacity(moe.num_experts());
            let mut x_next = x_mid.clone();
            let mut gathered = Vec::new();
            for (e, assigned) in plan.per_expert.iter().enumerate() {
                if assigned.is_empty() {
                    acts.push(None);
                    continue;
                }
                gathered.clear();
                for a in assigned {
                    gathered.extend_from_slice(&ffn_in[a.token * d..(a.token + 1) * d]);
                }
                let act = moe.experts[e].forward_rows(&gathered, assigned.len());
                for (a, y) in assigned.iter().zip(act.out.chunks_exact(d)) {
                    let w = T::of(a.weight);
                    for (o, &v) in x_next[a.token * d..(a.token + 1) * d].iter_mut().zip(y) {
                        *o += w * v;
                    }
                }
                acts.push(keep_cache.then_some(act));
            }
            routing.push(decisions.clone());
            if keep_cache {
                blocks.push(BlockCache {
                    x_in: std::mem::take(&mut x),
                    attn_in,
                    attn_inv_rms,
                    attn,
                    x_mid,
                    ffn_in,
                    ffn_inv_rms,
                    moe: MoeCache {
                        logits,
                        decisions,
                        plan,
                        acts,
                    },
                });
            }
            x = x_next;
        }
        let (hidden, final_inv_rms) = norm_rows(&x, self.final_norm.data(), d);
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(ForwardState {
            seq,
            blocks,
            x_final: x,
            final_inv_rms,
            hidden,
            routing,
        })
    }

    /// Output-head logits for one hidden row.
    pub(crate) fn head_row(&self, hidden: &[T]) -> Vec<T> {
        gemm(hidden, self.output.data(), 1, self.config.dim, self.config.vocab_size)
    }

    /// Logits for every position plus the routing decisions of every (layer, token).
    pub fn forward(&self, tokens: &[u32]) -> Result<(Tensor<T>, RoutingTrace)> {
        let state = self.run(tokens, false)?;
        let cfg = &self.config;
        let logits = gemm(&state.hidden, self.output.data(), state.seq, cfg.dim, cfg.vocab_size);
        let logits = Tensor::new(vec![state.seq, cfg.vocab_size], logits)?.ensure_finite("forward")?;
        let mut trace = RoutingTrace::new(self.trace_header());
        trace.push(TraceDocument {
            doc_id: 0,
            label: None,
            layers: state.routing,
        })?;
        Ok((logits, trace))
    }

    /// Logits of the last position only.
    pub fn last_logits(&self, tokens: &[u32]) -> Result<Vec<T>> {
        let state = self.run(tokens, false)?;
        let d = self.config.dim;
        let logits = self.head_row(&state.hidden[(state.seq - 1) * d..]);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(logits)
    }

    pub fn trace_header(&self) -> TraceHeader {
        TraceHeader {
            n_layers: self.config.n_layers,
            num_experts: self.config.num_experts,
            top_k: self.config.top_k_experts,
        }
    }

    /// Routing decisions only, as one trace document.
    pub fn route_document(&self, tokens: &[u32], doc_id: u64, label: Option<String>) -> Result<TraceDocument> {
        let state = self.run(tokens, false)?;
        Ok(TraceDocument {
            doc_id,
            label,
            layers: state.routing,
        })
    }

    /// Appends `max_new` argmax tokens. Fails with [`Error::Truncated`] if the
    /// context fills up before `max_new` tokens were produced.
    pub fn decode_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            if out.len() >= self.config.context_len {
                return Err(Error::Truncated {
                    len: out.len(),
                    max: self.config.context_len,
                });
            }
            let logits = self.last_logits(&out)?;
            out.push(argmax(&logits) as u32);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Attention sub-block on an already-normalized `[seq × dim]` input; positions are `0..seq`.
pub fn attention_block<T: Scalar>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let seq = x.rows();
    if x.cols() != config.dim {
        return Err(Error::dim("attention_block", format!("input width {} for dim {}", x.cols(), config.dim)));
    }
    if seq > config.context_len {
        return Err(Error::ContextOverflow {
            len: seq,
            max: config.context_len,
        });
    }
    let (out, _) = weights.forward(config, x.data(), seq)?;
    Tensor::new(vec![seq, config.dim], out)?.ensure_finite("attention_block")
}
