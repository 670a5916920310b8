//! Model hyperparameters and parameter accounting.
//!
//! Config files are flat `key = value` text whose keys are exactly the field
//! names below, e.g.
//!
//! ```text
//! dim = 4096
//! n_layers = 32
//! head_dim = 128
//! hidden_dim = 14336
//! n_heads = 32
//! n_kv_heads = 8
//! context_len = 32768
//! vocab_size = 32000
//! num_experts = 8
//! top_k_experts = 2
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Field names in canonical order. Checkpoints serialize fields in this order.
pub const FIELD_NAMES: [&str; 10] = [
    "dim",
    "n_layers",
    "head_dim",
    "hidden_dim",
    "n_heads",
    "n_kv_heads",
    "context_len",
    "vocab_size",
    "num_experts",
    "top_k_experts",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub num_experts: usize,
    pub top_k_experts: usize,
}

impl ModelConfig {
    /// The full-size 8x7B architecture.
    pub const fn reference_8x7b() -> Self {
        Self {
            dim: 4096,
            n_layers: 32,
            head_dim: 128,
            hidden_dim: 14336,
            n_heads: 32,
            n_kv_heads: 8,
            context_len: 32768,
            vocab_size: 32000,
            num_experts: 8,
            top_k_experts: 2,
        }
    }

    pub fn as_array(&self) -> [usize; 10] {
        [
            self.dim,
            self.n_layers,
            self.head_dim,
            self.hidden_dim,
            self.n_heads,
            self.n_kv_heads,
            self.context_len,
            self.vocab_size,
            self.num_experts,
            self.top_k_experts,
        ]
    }

    pub fn from_array(v: [usize; 10]) -> Result<Self> {
        let cfg = Self {
            dim: v[0],
            n_layers: v[1],
            head_dim: v[2],
            hidden_dim: v[3],
            n_heads: v[4],
            n_kv_heads: v[5],
            context_len: v[6],
            vocab_size: v[7],
            num_experts: v[8],
            top_k_experts: v[9],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in FIELD_NAMES.iter().zip(self.as_array()) {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if self.top_k_experts > self.num_experts {
            return Err(Error::Config(format!(
                "top_k_experts {} exceeds num_experts {}",
                self.top_k_experts, self.num_experts
            )));
        }
        Ok(())
    }

    /// Width of the concatenated query heads.
    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Width of the concatenated key (or value) heads.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn parameter_breakdown(&self, mode: CountMode) -> ParameterBreakdown {
        let (d, h, l) = (self.dim as u64, self.hidden_dim as u64, self.n_layers as u64);
        let experts = match mode {
            CountMode::Sparse => self.num_experts as u64,
            CountMode::Active => self.top_k_experts as u64,
        };
        let attention = d * self.q_dim() as u64 * 2 + d * self.kv_dim() as u64 * 2;
        ParameterBreakdown {
            embedding: self.vocab_size as u64 * d,
            output_head: d * self.vocab_size as u64,
            attention: l * attention,
            router: l * d * self.num_experts as u64,
            experts: l * experts * 3 * d * h,
            norms: l * 2 * d + d,
        }
    }

    pub fn count_parameters(&self, mode: CountMode) -> u64 {
        self.parameter_breakdown(mode).total()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference_8x7b()
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values: [Option<usize>; 10] = [None; 10];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let slot = FIELD_NAMES
                .iter()
                .position(|&f| f == key)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)))?;
            if values[slot].is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            let parsed = value.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("line {}: {key} needs a positive integer", lineno + 1))
            })?;
            values[slot] = Some(parsed);
        }
        let mut out = [0usize; 10];
        for (i, v) in values.iter().enumerate() {
            out[i] = v.ok_or_else(|| Error::Config(format!("missing key {:?}", FIELD_NAMES[i])))?;
        }
        Self::from_array(out)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in FIELD_NAMES.iter().zip(self.as_array()) {
            writeln!(f, "{name} = {v}")?;
        }
        Ok(())
    }
}

/// Which experts to count: all of them (memory) or the `top_k` used per token (compute).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Sparse,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub embedding: u64,
    pub output_head: u64,
    pub attention: u64,
    pub router: u64,
    pub experts: u64,
    pub norms: u64,
}

impl ParameterBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.output_head + self.attention + self.router + self.experts + self.norms
    }

    /// Experts plus routers only.
    pub fn moe_only(&self) -> u64 {
        self.router + self.experts
    }
}

/// Two-significant-figure rendering with a B/M/K suffix, e.g. `47B`.
pub fn human_count(n: u64) -> String {
    let (scale, suffix) = match n {
        n if n >= 1_000_000_000 => (1e9, "B"),
        n if n >= 1_000_000 => (1e6, "M"),
        n if n >= 1_000 => (1e3, "K"),
        _ => return n.to_string(),
    };
    let v = n as f64 / scale;
    let digits = v.log10().floor() as i32 + 1;
    let decimals = (2 - digits).max(0) as usize;
    format!("{v:.decimals$}{suffix}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            dim: 8,
            n_layers: 1,
            head_dim: 4,
            hidden_dim: 16,
            n_heads: 2,
            n_kv_heads: 1,
            context_len: 32,
            vocab_size: 10,
            num_experts: 4,
            top_k_experts: 2,
        }
    }

    #[test]
    fn moe_only_tally_for_toy_layer() {
        let c = toy();
        assert_eq!(c.parameter_breakdown(CountMode::Sparse).moe_only(), 1568);
        assert_eq!(c.parameter_breakdown(CountMode::Active).moe_only(), 800);
    }

    #[test]
    fn full_size_totals_match_hand_tally() {
        // Per layer: attention 2·4096·4096 + 2·4096·1024 = 41_943_040,
        // one expert 3·4096·14336 = 176_160_768, router 4096·8, norms 2·4096.
        // Embedding and head 32000·4096 each, final norm 4096.
        let c = ModelConfig::reference_8x7b();
        assert_eq!(c.count_parameters(CountMode::Sparse), 46_702_792_704);
        assert_eq!(c.count_parameters(CountMode::Active), 12_879_925_248);
        assert_eq!(human_count(c.count_parameters(CountMode::Sparse)), "47B");
        assert_eq!(human_count(c.count_parameters(CountMode::Active)), "13B");
    }

    #[test]
    fn k_equal_n_counts_match() {
        let mut c = toy();
        c.top_k_experts = c.num_experts;
        assert_eq!(c.count_parameters(CountMode::Sparse), c.count_parameters(CountMode::Active));
    }

    #[test]
    fn parse_round_trip() {
        let c = ModelConfig::reference_8x7b();
        let text = c.to_string();
        assert_eq!(text.parse::<ModelConfig>().unwrap(), c);
        let with_comments = format!("# full size\n{}\n", text.replace(" = ", ": "));
        assert_eq!(with_comments.parse::<ModelConfig>().unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        let text = ModelConfig::reference_8x7b().to_string();
        assert!(text.replace("dim = 4096\n", "").parse::<ModelConfig>().is_err());
        assert!(format!("{text}bogus = 1\n").parse::<ModelConfig>().is_err());
        assert!(format!("{text}dim = 1\n").parse::<ModelConfig>().is_err());
        assert!(text.replace("n_kv_heads = 8", "n_kv_heads = 5").parse::<ModelConfig>().is_err());
        assert!(text.replace("top_k_experts = 2", "top_k_experts = 9").parse::<ModelConfig>().is_err());
        assert!(text.replace("dim = 4096", "dim = -3").parse::<ModelConfig>().is_err());
        assert!("dim 4096".parse::<ModelConfig>().is_err());
    }

    #[test]
    fn human_count_rounds_to_two_figures() {
        assert_eq!(human_count(46_702_792_704), "47B");
        assert_eq!(human_count(12_879_925_248), "13B");
        assert_eq!(human_count(1_568), "1.6K");
        assert_eq!(human_count(800), "800");
        assert_eq!(human_count(3_450_000), "3.5M");
    }

    proptest::proptest! {
        #[test]
        fn active_never_exceeds_sparse(n in 1usize..16, k in 1usize..16, d in 1usize..64, h in 1usize..64) {
            let k = k.min(n);
            let mut c = toy();
            c.num_experts = n;
            c.top_k_experts = k;
            c.dim = d;
            c.hidden_dim = h;
            let s = c.count_parameters(CountMode::Sparse);
            let a = c.count_parameters(CountMode::Active);
            proptest::prop_assert!(a <= s);
            proptest::prop_assert_eq!(a == s, k == n);
        }
    }
}
