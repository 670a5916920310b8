//! Long-context evaluations at toy scale: passkey retrieval over a grid of
//! context lengths and insertion depths, and perplexity against window size.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::rng::{self, Stream};
use crate::tensor::Scalar;
use crate::tokenizer;
use crate::train::{ExampleSource, TrainExample};

pub const SENTINEL_PREFIX: &str = "The pass key is ";
pub const SENTINEL_SUFFIX: &str = ". ";
pub const QUESTION: &str = "What is the pass key? ";

const NOUNS: [&str; 16] = [
    "grass", "sky", "sun", "river", "stone", "bird", "house", "road", "tree", "cloud", "field", "lamp", "door",
    "boat", "hill", "wind",
];
const ADJECTIVES: [&str; 10] = ["green", "blue", "quiet", "old", "bright", "small", "warm", "dark", "tall", "soft"];
const VERBS: [&str; 8] = ["sees", "finds", "follows", "meets", "passes", "holds", "watches", "crosses"];

/// Filler prose of exactly `len` bytes, starting at a random offset into the
/// sentence stream; it never contains a digit.
pub fn filler_text(rng: &mut rng::Rng, len: usize) -> String {
    let skip = rng.gen_range(0..32);
    let mut s = String::with_capacity(skip + len + 48);
    while s.len() < skip + len {
        let pick = |rng: &mut rng::Rng, words: &[&'static str]| *words.choose(rng).expect("word lists are non-empty");
        let sentence = match rng.gen_range(0..3) {
            0 => format!("The {} is {}. ", pick(rng, &NOUNS), pick(rng, &ADJECTIVES)),
            1 => format!(
                "The {} {} {} the {}. ",
                pick(rng, &ADJECTIVES),
                pick(rng, &NOUNS),
                pick(rng, &VERBS),
                pick(rng, &NOUNS)
            ),
            _ => "Here we go again and back. ".to_string(),
        };
        s.push_str(&sentence);
    }
    s.truncate(skip + len);
    s.split_off(skip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasskeySpec {
    /// Prompt plus answer length in tokens.
    pub context_len: usize,
    /// Where the sentinel sits within the filler, from 0 (start) to 1 (end).
    pub position: f64,
    pub key_len: usize,
    /// ASCII digits the passkey is drawn from.
    pub alphabet: Vec<u8>,
    /// Draw passkey characters without replacement.
    pub distinct: bool,
    pub filler_seed: u64,
}

impl Default for PasskeySpec {
    fn default() -> Self {
        Self {
            context_len: 256,
            position: 0.5,
            key_len: 5,
            alphabet: b"0123456789".to_vec(),
            distinct: true,
            filler_seed: 0,
        }
    }
}

impl PasskeySpec {
    /// Tokens used by everything except the filler.
    pub fn fixed_len(&self) -> usize {
        SENTINEL_PREFIX.len() + SENTINEL_SUFFIX.len() + QUESTION.len() + 2 * self.key_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_len == 0 {
            return Err(Error::Config("passkey length must be positive".into()));
        }
        if self.alphabet.is_empty() || !self.alphabet.iter().all(u8::is_ascii_digit) {
            return Err(Error::Config("passkey alphabet must be non-empty ASCII digits".into()));
        }
        if self.distinct && self.key_len > self.alphabet.len() {
            return Err(Error::Config("distinct passkey longer than its alphabet".into()));
        }
        if !(0.0..=1.0).contains(&self.position) {
            return Err(Error::Config(format!("position {} outside [0, 1]", self.position)));
        }
        if self.fixed_len() > self.context_len {
            return Err(Error::Config(format!(
                "context {} cannot hold sentinel, question and answer ({} tokens)",
                self.context_len,
                self.fixed_len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasskeyPrompt {
    pub prompt: Vec<u32>,
    pub passkey: Vec<u32>,
    /// Token offset of the sentinel sentence.
    pub sentinel_at: usize,
}

/// Builds `filler prefix + sentinel + filler suffix + question`, padded with
/// filler so that prompt and answer fill the context exactly.
pub fn generate_passkey_prompt(spec: &PasskeySpec, seed: u64) -> Result<PasskeyPrompt> {
    spec.validate()?;
    let mut rng = rng::substream(spec.filler_seed, Stream::Eval, seed);
    let key: Vec<u8> = if spec.distinct {
        spec.alphabet.choose_multiple(&mut rng, spec.key_len).copied().collect()
    } else {
        (0..spec.key_len)
            .map(|_| *spec.alphabet.choose(&mut rng).expect("alphabet validated"))
            .collect()
    };
    let key = String::from_utf8(key).expect("digits are ASCII");
    let filler_len = spec.context_len - spec.fixed_len();
    let filler = filler_text(&mut rng, filler_len);
    let at = (spec.position * filler_len as f64).round() as usize;
    let text = format!(
        "{}{SENTINEL_PREFIX}{key}{SENTINEL_SUFFIX}{}{QUESTION}",
        &filler[..at],
        &filler[at..]
    );
    Ok(PasskeyPrompt {
        prompt: tokenizer::encode(&text),
        passkey: tokenizer::encode(&key),
        sentinel_at: at,
    })
}

/// Anything that continues a prompt greedily.
pub trait Completer {
    /// The `max_new` tokens following `prompt`.
    fn complete(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>>;
}

impl<T: Scalar> Completer for TransformerModel<T> {
    fn complete(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let mut out = self.decode_greedy(prompt, max_new)?;
        Ok(out.split_off(prompt.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasskeyGrid {
    pub contexts: Vec<usize>,
    pub positions: Vec<f64>,
    pub trials: usize,
    pub base: PasskeySpec,
}

impl Default for PasskeyGrid {
    fn default() -> Self {
        Self {
            contexts: vec![64, 128, 256],
            positions: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            trials: 20,
            base: PasskeySpec::default(),
        }
    }
}

impl PasskeyGrid {
    pub fn cell_spec(&self, context_len: usize, position: f64) -> PasskeySpec {
        PasskeySpec {
            context_len,
            position,
            ..self.base.clone()
        }
    }
}

/// Exact-match accuracy per (context length, position) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalGrid {
    pub contexts: Vec<usize>,
    pub positions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// `accuracy[context][position]`
    pub accuracy: Vec<Vec<f64>>,
}

impl RetrievalGrid {
    pub fn min(&self) -> f64 {
        self.accuracy.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# seed={} trials={}\ncontext", self.seed, self.trials);
        for p in &self.positions {
            let _ = write!(s, "\tpos_{p:.2}");
        }
        s.push('\n');
        for (c, row) in self.contexts.iter().zip(&self.accuracy) {
            let _ = write!(s, "{c}");
            for a in row {
                let _ = write!(s, "\t{a:.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Greedy-decodes the passkey for `grid.trials` prompts per cell.
pub fn passkey_eval<M: Completer + ?Sized>(model: &M, grid: &PasskeyGrid, seed: u64) -> Result<RetrievalGrid> {
    let mut accuracy = Vec::with_capacity(grid.contexts.len());
    for (ci, &ctx) in grid.contexts.iter().enumerate() {
        let mut row = Vec::with_capacity(grid.positions.len());
        for (pi, &pos) in grid.positions.iter().enumerate() {
            let spec = grid.cell_spec(ctx, pos);
            spec.validate()?;
            let cell = (ci * grid.positions.len() + pi) as u64;
            let mut trial_rng = rng::substream(seed, Stream::Eval, cell);
            let mut hits = 0usize;
            for _ in 0..grid.trials {
                let p = generate_passkey_prompt(&spec, trial_rng.gen())?;
                if model.complete(&p.prompt, p.passkey.len())? == p.passkey {
                    hits += 1;
                }
            }
            row.push(if grid.trials == 0 { 0.0 } else { hits as f64 / grid.trials as f64 });
        }
        accuracy.push(row);
    }
    Ok(RetrievalGrid {
        contexts: grid.contexts.clone(),
        positions: grid.positions.clone(),
        trials: grid.trials,
        seed,
        accuracy,
    })
}

/// Passkey prompts of random length and depth as training sequences. Only the
/// answer is scored unless `score_all` is set.
#[derive(Debug, Clone)]
pub struct PasskeyTask {
    pub min_context: usize,
    pub max_context: usize,
    pub base: PasskeySpec,
    pub score_all: bool,
}

impl PasskeyTask {
    pub fn example(&self, spec: &PasskeySpec, seed: u64) -> Result<TrainExample> {
        let p = generate_passkey_prompt(spec, seed)?;
        let mut tokens = p.prompt.clone();
        tokens.extend_from_slice(&p.passkey);
        let answer_from = p.prompt.len() - 1;
        let targets = (0..tokens.len() - 1)
            .map(|i| (self.score_all || i >= answer_from).then_some(tokens[i + 1]))
            .collect();
        tokens.pop();
        Ok(TrainExample { tokens, targets })
    }
}

impl ExampleSource for PasskeyTask {
    fn sample(&mut self, rng: &mut rng::Rng) -> TrainExample {
        let spec = PasskeySpec {
            context_len: rng.gen_range(self.min_context..=self.max_context),
            position: rng.gen(),
            ..self.base.clone()
        };
        self.example(&spec, rng.gen())
            .expect("task contexts hold the fixed template")
    }
}

/// Back-to-back segments, each a fresh random block of `period` tokens from
/// `0..alphabet` repeated `repeats` times, truncated to `len`.
pub fn periodic_corpus(period: usize, alphabet: u32, repeats: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let mut out = Vec::with_capacity(len + period * repeats);
    while out.len() < len {
        let block: Vec<u32> = (0..period).map(|_| rng.gen_range(0..alphabet)).collect();
        for _ in 0..repeats {
            out.extend_from_slice(&block);
        }
    }
    out.truncate(len);
    out
}

/// Perplexity for each window size `s`: the corpus is cut into non-overlapping
/// windows of `s` tokens and every token is scored given `bos` and its window prefix.
pub fn perplexity_vs_context<T: Scalar>(
    model: &TransformerModel<T>,
    corpus: &[u32],
    sizes: &[usize],
    bos: u32,
) -> Result<Vec<(usize, f64)>> {
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if sizes.contains(&0) {
        return Err(Error::Config("window sizes must be positive".into()));
    }
    if corpus.len() < largest {
        return Err(Error::NoData(format!(
            "corpus of {} tokens is shorter than the largest window {largest}",
            corpus.len()
        )));
    }
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let (mut nll, mut count) = (0.0f64, 0usize);
        for window in corpus.chunks_exact(s) {
            let mut input = Vec::with_capacity(s);
            input.push(bos);
            input.extend_from_slice(&window[..s - 1]);
            let (logits, _) = model.forward(&input)?;
            for (row, &target) in logits.data().chunks_exact(v).zip(window) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
                let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
                nll += z.ln() - (row[target as usize].as_f64() - max);
                count += 1;
            }
        }
        out.push((s, (nll / count as f64).exp()));
    }
    Ok(out)
}

pub fn perplexity_tsv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("context\tperplexity\n");
    for (c, p) in rows {
        let _ = writeln!(s, "{c}\t{p:.6}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::Tensor;
    use std::collections::HashSet;

    struct Oracle;

    impl Completer for Oracle {
        fn complete(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
            let text = tokenizer::decode(prompt);
            let start = text.find(SENTINEL_PREFIX).unwrap() + SENTINEL_PREFIX.len();
            Ok(tokenizer::encode(&text[start..start + max_new]))
        }
    }

    struct Corrupted;

    impl Completer for Corrupted {
        fn complete(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
            let mut key = Oracle.complete(prompt, max_new)?;
            key[0] = if key[0] == u32::from(b'0') { u32::from(b'1') } else { u32::from(b'0') };
            Ok(key)
        }
    }

    fn count(hay: &str, needle: &str) -> usize {
        hay.match_indices(needle).count()
    }

    #[test]
    fn prompt_shape() {
        for (ctx, pos) in [(64, 0.0), (128, 0.5), (256, 1.0), (61, 0.3)] {
            let spec = PasskeySpec {
                context_len: ctx,
                position: pos,
                ..PasskeySpec::default()
            };
            let p = generate_passkey_prompt(&spec, 3).unwrap();
            assert_eq!(p.prompt.len() + p.passkey.len(), ctx);
            let text = tokenizer::decode(&p.prompt);
            let key = tokenizer::decode(&p.passkey);
            assert_eq!(count(&text, &key), 1);
            assert_eq!(text.bytes().filter(u8::is_ascii_digit).count(), 5);
            assert!(text.ends_with(QUESTION));
            if pos == 0.0 {
                assert!(text.starts_with(SENTINEL_PREFIX));
                assert_eq!(p.sentinel_at, 0);
            }
        }
    }

    #[test]
    fn prompt_errors_and_determinism() {
        let small = PasskeySpec {
            context_len: 49,
            ..PasskeySpec::default()
        };
        assert!(matches!(generate_passkey_prompt(&small, 0), Err(Error::Config(_))));
        let spec = PasskeySpec::default();
        assert_eq!(generate_passkey_prompt(&spec, 9).unwrap(), generate_passkey_prompt(&spec, 9).unwrap());
        let bad = PasskeySpec {
            alphabet: b"0a".to_vec(),
            ..PasskeySpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeds_do_not_collide() {
        let spec = PasskeySpec {
            context_len: 64,
            ..PasskeySpec::default()
        };
        let prompts: HashSet<Vec<u32>> = (0..1000)
            .map(|s| generate_passkey_prompt(&spec, s).unwrap().prompt)
            .collect();
        assert_eq!(prompts.len(), 1000);
    }

    #[test]
    fn oracle_and_corrupted_stubs() {
        let grid = PasskeyGrid {
            trials: 5,
            ..PasskeyGrid::default()
        };
        let g = passkey_eval(&Oracle, &grid, 1).unwrap();
        assert!(g.accuracy.iter().flatten().all(|&a| a == 1.0));
        assert_eq!(g.accuracy.len(), 3);
        assert_eq!(g.accuracy[0].len(), 5);
        let c = passkey_eval(&Corrupted, &grid, 1).unwrap();
        assert!(c.accuracy.iter().flatten().all(|&a| a == 0.0));
        let tsv = g.to_tsv();
        assert_eq!(tsv.lines().nth(1).unwrap(), "context\tpos_0.10\tpos_0.30\tpos_0.50\tpos_0.70\tpos_0.90");
    }

    #[test]
    fn untrained_model_fails_ten_digit_keys() {
        let cfg = ModelConfig {
            dim: 16,
            n_layers: 1,
            head_dim: 8,
            hidden_dim: 32,
            n_heads: 2,
            n_kv_heads: 1,
            context_len: 128,
            vocab_size: tokenizer::VOCAB_SIZE,
            num_experts: 4,
            top_k_experts: 2,
        };
        let m = TransformerModel::<f32>::random(cfg, &mut rng::stream(0, Stream::Init)).unwrap();
        let grid = PasskeyGrid {
            contexts: vec![128],
            positions: vec![0.5],
            trials: 10,
            base: PasskeySpec {
                key_len: 10,
                ..PasskeySpec::default()
            },
        };
        assert_eq!(passkey_eval(&m, &grid, 0).unwrap().min(), 0.0);
    }

    #[test]
    fn training_examples_score_only_the_answer() {
        let task = PasskeyTask {
            min_context: 64,
            max_context: 64,
            base: PasskeySpec::default(),
            score_all: false,
        };
        let spec = task.base.clone();
        let spec = PasskeySpec { context_len: 64, ..spec };
        let ex = task.example(&spec, 4).unwrap();
        let p = generate_passkey_prompt(&spec, 4).unwrap();
        assert_eq!(ex.tokens.len(), 63);
        assert_eq!(ex.scored(), 5);
        let scored: Vec<u32> = ex.targets.iter().flatten().copied().collect();
        assert_eq!(scored, p.passkey);
    }

    fn uniform_model(vocab: usize) -> TransformerModel<f64> {
        let cfg = ModelConfig {
            dim: 8,
            n_layers: 1,
            head_dim: 4,
            hidden_dim: 8,
            n_heads: 2,
            n_kv_heads: 2,
            context_len: 32,
            vocab_size: vocab,
            num_experts: 2,
            top_k_experts: 1,
        };
        let mut m = TransformerModel::<f64>::random(cfg, &mut rng::stream(1, Stream::Init)).unwrap();
        m.output = Tensor::zeros(&[8, vocab]);
        m
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = uniform_model(13);
        let corpus = periodic_corpus(4, 12, 3, 200, 0);
        for (_, p) in perplexity_vs_context(&m, &corpus, &[1, 4, 16, 32], 12).unwrap() {
            assert!((p - 13.0).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn perplexity_errors_and_bounds() {
        let m = uniform_model(5);
        assert!(matches!(perplexity_vs_context(&m, &[1, 2, 3], &[4], 4), Err(Error::NoData(_))));
        let m = TransformerModel::<f64>::random(m.config, &mut rng::stream(2, Stream::Init)).unwrap();
        let corpus = periodic_corpus(3, 4, 2, 60, 1);
        for (_, p) in perplexity_vs_context(&m, &corpus, &[1, 5, 20], 4).unwrap() {
            assert!(p >= 1.0);
        }
    }

    #[test]
    fn unit_window_is_bos_conditional() {
        // With s = 1 every token is predicted from the BOS alone.
        let m = TransformerModel::<f64>::random(uniform_model(6).config, &mut rng::stream(3, Stream::Init)).unwrap();
        let corpus = [0u32, 3, 1, 1, 2, 0, 4];
        let (logits, _) = m.forward(&[5]).unwrap();
        let row = logits.data();
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        let mean: f64 = corpus.iter().map(|&t| lse - row[t as usize]).sum::<f64>() / corpus.len() as f64;
        let got = perplexity_vs_context(&m, &corpus, &[1], 5).unwrap()[0].1;
        assert!((got - mean.exp()).abs() < 1e-10);
    }

    #[test]
    fn periodic_corpus_repeats() {
        let c = periodic_corpus(5, 7, 3, 100, 2);
        assert_eq!(c.len(), 100);
        assert_eq!(&c[0..5], &c[5..10]);
        assert_eq!(&c[0..5], &c[10..15]);
        assert!(c.iter().all(|&t| t < 7));
    }

    #[test]
    fn filler_has_no_digits() {
        let mut r = rng::stream(0, Stream::Eval);
        let f = filler_text(&mut r, 5000);
        assert_eq!(f.len(), 5000);
        assert!(!f.bytes().any(|b| b.is_ascii_digit()));
    }
}
