//! Routing statistics over traces: expert-assignment distributions,
//! consecutive-token repetition rates with their random baselines, and
//! colour-annotated token rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::trace::RoutingTrace;

/// Which choice rank an event must come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceMode {
    First,
    Second,
    Either,
}

impl std::str::FromStr for ChoiceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(ChoiceMode::First),
            "second" => Ok(ChoiceMode::Second),
            "either" => Ok(ChoiceMode::Either),
            other => Err(Error::Config(format!("unknown choice mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ChoiceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChoiceMode::First => "first",
            ChoiceMode::Second => "second",
            ChoiceMode::Either => "either",
        })
    }
}

fn check_layer(trace: &RoutingTrace, layer: usize) -> Result<()> {
    if layer >= trace.header.n_layers {
        return Err(Error::Input(format!(
            "layer {layer} out of range for a trace of {} layers",
            trace.header.n_layers
        )));
    }
    if trace.is_empty() {
        return Err(Error::NoData("trace has no tokens".into()));
    }
    Ok(())
}

/// Share of assignment events that went to each expert.
///
/// Events are counted, not weighted by gate value, and normalized over all
/// events of the requested mode, so the uniform reference is `1/n`.
pub fn expert_distribution(trace: &RoutingTrace, layer: usize, mode: ChoiceMode) -> Result<Vec<f64>> {
    check_layer(trace, layer)?;
    let h = trace.header;
    if mode == ChoiceMode::Second && h.top_k < 2 {
        return Err(Error::Domain("second choice needs top_k >= 2".into()));
    }
    let mut counts = vec![0u64; h.num_experts];
    for d in trace.layer_stream(layer) {
        match mode {
            ChoiceMode::First => counts[d.choices[0].expert] += 1,
            ChoiceMode::Second => counts[d.choices[1].expert] += 1,
            ChoiceMode::Either => {
                for c in &d.choices {
                    counts[c.expert] += 1;
                }
            }
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Mergeable pair counts behind [`repetition_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RepetitionCounts {
    pub pairs: u64,
    pub same_first: u64,
    pub shared_any: u64,
}

impl RepetitionCounts {
    pub fn rate(&self, mode: ChoiceMode) -> Result<f64> {
        if self.pairs == 0 {
            return Err(Error::NoData("no consecutive token pairs".into()));
        }
        let hits = match mode {
            ChoiceMode::First => self.same_first,
            ChoiceMode::Either => self.shared_any,
            ChoiceMode::Second => return Err(Error::Domain("repetition is defined for first or either".into())),
        };
        Ok(hits as f64 / self.pairs as f64)
    }

    pub fn merge(&mut self, other: &RepetitionCounts) {
        self.pairs += other.pairs;
        self.same_first += other.same_first;
        self.shared_any += other.shared_any;
    }
}

/// Counts consecutive-token pairs of one layer; pairs never straddle documents.
pub fn repetition_counts(trace: &RoutingTrace, layer: usize) -> Result<RepetitionCounts> {
    check_layer(trace, layer)?;
    let mut c = RepetitionCounts::default();
    for doc in &trace.documents {
        for w in doc.layers[layer].windows(2) {
            c.pairs += 1;
            if w[0].first() == w[1].first() {
                c.same_first += 1;
            }
            if w[0].experts().any(|e| w[1].contains(e)) {
                c.shared_any += 1;
            }
        }
    }
    Ok(c)
}

/// Fraction of consecutive token pairs that repeat an expert: the same rank-1
/// expert (`First`) or any shared expert among their choices (`Either`).
pub fn repetition_rate(trace: &RoutingTrace, layer: usize, mode: ChoiceMode) -> Result<f64> {
    if mode == ChoiceMode::Second {
        return Err(Error::Domain("repetition is defined for first or either".into()));
    }
    repetition_counts(trace, layer)?.rate(mode)
}

/// Expected repetition rate when each token draws `k` distinct experts out of
/// `n` uniformly at random: `1/n` for `First`, `1 - C(n-k, k)/C(n, k)` for `Either`.
pub fn random_baseline(n: usize, k: usize, mode: ChoiceMode) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k = {k} must lie in 1..={n}")));
    }
    match mode {
        ChoiceMode::First => Ok(1.0 / n as f64),
        ChoiceMode::Either => {
            // C(n-k, k) / C(n, k) = prod_{i<k} (n-k-i) / (n-i), zero once n-k < k.
            let disjoint = if n - k < k {
                0.0
            } else {
                (0..k).map(|i| (n - k - i) as f64 / (n - i) as f64).product()
            };
            Ok(1.0 - disjoint)
        }
        ChoiceMode::Second => Err(Error::Domain("repetition is defined for first or either".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub layer: usize,
    pub first: f64,
    pub either: f64,
}

/// Repetition rates for every layer with the random baselines as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub rows: Vec<ProfileRow>,
    pub baseline_first: f64,
    pub baseline_either: f64,
}

impl LayerProfile {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tfirst\teither\tbaseline_first\tbaseline_either\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.layer, r.first, r.either, self.baseline_first, self.baseline_either
            );
        }
        s
    }
}

pub fn layer_profile(trace: &RoutingTrace) -> Result<LayerProfile> {
    let h = trace.header;
    let rows = (0..h.n_layers)
        .map(|layer| {
            let c = repetition_counts(trace, layer)?;
            Ok(ProfileRow {
                layer,
                first: c.rate(ChoiceMode::First)?,
                either: c.rate(ChoiceMode::Either)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerProfile {
        rows,
        baseline_first: random_baseline(h.num_experts, h.top_k, ChoiceMode::First)?,
        baseline_either: random_baseline(h.num_experts, h.top_k, ChoiceMode::Either)?,
    })
}

/// Per-expert proportions for each mode as a delimited table.
pub fn distribution_tsv(trace: &RoutingTrace, layer: usize) -> Result<String> {
    let n = trace.header.num_experts;
    let mut modes = vec![ChoiceMode::First];
    if trace.header.top_k >= 2 {
        modes.push(ChoiceMode::Second);
    }
    modes.push(ChoiceMode::Either);
    let cols = modes
        .iter()
        .map(|&m| expert_distribution(trace, layer, m))
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::from("expert");
    for m in &modes {
        let _ = write!(s, "\t{m}");
    }
    s.push_str("\tuniform\n");
    for e in 0..n {
        let _ = write!(s, "{e}");
        for c in &cols {
            let _ = write!(s, "\t{:.6}", c[e]);
        }
        let _ = writeln!(s, "\t{:.6}", 1.0 / n as f64);
    }
    Ok(s)
}

/// Fixed colour palette, cycled when there are more experts than colours.
pub const PALETTE: [(u8, &str); 8] = [
    (196, "#e6194b"),
    (34, "#3cb44b"),
    (33, "#4363d8"),
    (208, "#f58231"),
    (129, "#911eb4"),
    (37, "#42d4f4"),
    (201, "#f032e6"),
    (142, "#808000"),
];

/// Run of consecutive tokens sharing a first-choice expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub expert: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColoredDocument {
    pub spans: Vec<Span>,
}

/// Groups `tokens` into spans by the first-choice expert at `layer`.
pub fn colorize_tokens(trace: &RoutingTrace, layer: usize, tokens: &[String]) -> Result<ColoredDocument> {
    check_layer(trace, layer)?;
    if tokens.len() != trace.total_tokens() {
        return Err(Error::Input(format!(
            "{} tokens for a trace of {} tokens",
            tokens.len(),
            trace.total_tokens()
        )));
    }
    let mut spans: Vec<Span> = Vec::new();
    for (d, tok) in trace.layer_stream(layer).zip(tokens) {
        let e = d.first();
        match spans.last_mut() {
            Some(s) if s.expert == e => s.text.push_str(tok),
            _ => spans.push(Span {
                expert: e,
                text: tok.clone(),
            }),
        }
    }
    Ok(ColoredDocument { spans })
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn html_unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
}

const ANSI_RESET: &str = "\x1b[0m";

impl ColoredDocument {
    pub fn plain_text(&self) -> String {
        self.spans.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn to_ansi(&self) -> String {
        let mut s = String::new();
        for span in &self.spans {
            let (code, _) = PALETTE[span.expert % PALETTE.len()];
            let _ = write!(s, "\x1b[38;5;{code}m{}{ANSI_RESET}", span.text);
        }
        s
    }

    /// Standalone page; every span carries its expert id in `data-expert`.
    pub fn to_html(&self) -> String {
        let mut s = String::from(
            "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>expert routing</title></head>\n<body><pre>",
        );
        for span in &self.spans {
            let (_, color) = PALETTE[span.expert % PALETTE.len()];
            let _ = write!(
                s,
                "<span data-expert=\"{}\" style=\"color:{color}\">{}</span>",
                span.expert,
                html_escape(&span.text)
            );
        }
        s.push_str("</pre></body>\n</html>\n");
        s
    }
}

/// Removes the escape sequences written by [`ColoredDocument::to_ansi`].
pub fn strip_ansi(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\x1b' {
            for c in chars.by_ref() {
                if c == 'm' {
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Recovers the text of a page written by [`ColoredDocument::to_html`].
pub fn strip_html(s: &str) -> String {
    let body = s
        .split_once("<pre>")
        .and_then(|(_, rest)| rest.rsplit_once("</pre>"))
        .map_or(s, |(b, _)| b);
    let mut out = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('<') {
        out.push_str(&html_unescape(&rest[..open]));
        let close = rest[open..].find('>').map_or(rest.len(), |c| open + c + 1);
        rest = &rest[close..];
    }
    out.push_str(&html_unescape(rest));
    out
}

/// Synthetic traces with known statistics.
pub mod synthetic {
    use rand::seq::index::sample;
    use rand::Rng;

    use crate::moe::{ExpertChoice, GateDecision};
    use crate::rng::{self, Stream};
    use crate::trace::{RoutingTrace, TraceDocument, TraceHeader};

    fn decision(experts: Vec<usize>) -> GateDecision {
        // Weights only need to be valid and rank-ordered.
        let k = experts.len();
        let z: f64 = (0..k).map(|r| 0.5f64.powi(r as i32)).sum();
        GateDecision::new(
            experts
                .into_iter()
                .enumerate()
                .map(|(r, expert)| ExpertChoice {
                    expert,
                    weight: 0.5f64.powi(r as i32) / z,
                })
                .collect(),
        )
    }

    /// Every token independently picks `top_k` distinct experts uniformly.
    pub fn uniform_trace(header: TraceHeader, docs: usize, tokens_per_doc: usize, seed: u64) -> RoutingTrace {
        let mut rng = rng::stream(seed, Stream::Synthetic);
        let mut trace = RoutingTrace::new(header);
        for doc in 0..docs {
            let layers = (0..header.n_layers)
                .map(|_| {
                    (0..tokens_per_doc)
                        .map(|_| decision(sample(&mut rng, header.num_experts, header.top_k).into_vec()))
                        .collect()
                })
                .collect();
            trace
                .push(TraceDocument {
                    doc_id: doc as u64,
                    label: None,
                    layers,
                })
                .expect("generated documents are well formed");
        }
        trace
    }

    /// Layer `l` repeats the previous token's first choice with probability
    /// `first_repeat[l]` and otherwise picks uniformly among the other experts,
    /// so its first-choice repetition rate is exactly `first_repeat[l]` in expectation.
    /// Lower-ranked choices are uniform among the remaining experts.
    pub fn planted_trace(
        num_experts: usize,
        top_k: usize,
        first_repeat: &[f64],
        docs: usize,
        tokens_per_doc: usize,
        seed: u64,
    ) -> RoutingTrace {
        let header = TraceHeader {
            n_layers: first_repeat.len(),
            num_experts,
            top_k,
        };
        let mut rng = rng::stream(seed, Stream::Synthetic);
        let mut trace = RoutingTrace::new(header);
        for doc in 0..docs {
            let mut layers = Vec::with_capacity(first_repeat.len());
            for &p in first_repeat {
                let mut decisions: Vec<GateDecision> = Vec::with_capacity(tokens_per_doc);
                for t in 0..tokens_per_doc {
                    let first = match decisions.last() {
                        Some(prev) if t > 0 && rng.gen::<f64>() < p => prev.first(),
                        Some(prev) => {
                            let other = rng.gen_range(0..num_experts - 1);
                            if other >= prev.first() { other + 1 } else { other }
                        }
                        None => rng.gen_range(0..num_experts),
                    };
                    let mut experts = vec![first];
                    let rest: Vec<usize> = (0..num_experts).filter(|&e| e != first).collect();
                    for i in sample(&mut rng, rest.len(), top_k - 1).into_iter() {
                        experts.push(rest[i]);
                    }
                    decisions.push(decision(experts));
                }
                layers.push(decisions);
            }
            trace
                .push(TraceDocument {
                    doc_id: doc as u64,
                    label: None,
                    layers,
                })
                .expect("generated documents are well formed");
        }
        trace
    }

    /// Single-layer, `top_k = 1` trace made of runs of `run_len` tokens on one
    /// expert, with a new random expert (different from the last) per run.
    pub fn run_length_trace(num_experts: usize, run_len: usize, tokens: usize, seed: u64) -> RoutingTrace {
        let header = TraceHeader {
            n_layers: 1,
            num_experts,
            top_k: 1,
        };
        let mut rng = rng::stream(seed, Stream::Synthetic);
        let mut decisions = Vec::with_capacity(tokens);
        let mut current = rng.gen_range(0..num_experts);
        for t in 0..tokens {
            if t > 0 && t % run_len == 0 {
                let other = rng.gen_range(0..num_experts - 1);
                current = if other >= current { other + 1 } else { other };
            }
            decisions.push(decision(vec![current]));
        }
        let mut trace = RoutingTrace::new(header);
        trace
            .push(TraceDocument {
                doc_id: 0,
                label: None,
                layers: vec![decisions],
            })
            .expect("generated documents are well formed");
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use crate::moe::{ExpertChoice, GateDecision};
    use crate::trace::{TraceDocument, TraceHeader};

    fn constant_trace(first: usize, second: usize, tokens: usize) -> RoutingTrace {
        let d = GateDecision::new(vec![
            ExpertChoice { expert: first, weight: 0.7 },
            ExpertChoice { expert: second, weight: 0.3 },
        ]);
        let mut t = RoutingTrace::new(TraceHeader {
            n_layers: 1,
            num_experts: 8,
            top_k: 2,
        });
        t.push(TraceDocument {
            doc_id: 0,
            label: None,
            layers: vec![vec![d; tokens]],
        })
        .unwrap();
        t
    }

    #[test]
    fn distribution_on_constructed_trace() {
        let t = constant_trace(0, 1, 10);
        let either = expert_distribution(&t, 0, ChoiceMode::Either).unwrap();
        assert_eq!(&either[..3], &[0.5, 0.5, 0.0]);
        let first = expert_distribution(&t, 0, ChoiceMode::First).unwrap();
        assert_eq!(&first[..2], &[1.0, 0.0]);
        assert_eq!(first.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn distribution_errors() {
        let t = constant_trace(0, 1, 4);
        assert!(expert_distribution(&t, 1, ChoiceMode::First).is_err());
        let empty = RoutingTrace::new(t.header);
        assert!(matches!(expert_distribution(&empty, 0, ChoiceMode::First), Err(Error::NoData(_))));
        let k1 = uniform_trace(TraceHeader { n_layers: 1, num_experts: 4, top_k: 1 }, 1, 5, 0);
        assert!(expert_distribution(&k1, 0, ChoiceMode::Second).is_err());
    }

    #[test]
    fn either_is_average_of_first_and_second() {
        let t = uniform_trace(TraceHeader { n_layers: 2, num_experts: 8, top_k: 2 }, 3, 500, 4);
        for layer in 0..2 {
            let f = expert_distribution(&t, layer, ChoiceMode::First).unwrap();
            let s = expert_distribution(&t, layer, ChoiceMode::Second).unwrap();
            let e = expert_distribution(&t, layer, ChoiceMode::Either).unwrap();
            for i in 0..8 {
                assert!((e[i] - 0.5 * (f[i] + s[i])).abs() < 1e-12);
            }
            assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn repetition_on_constructed_traces() {
        let same = constant_trace(0, 1, 20);
        assert_eq!(repetition_rate(&same, 0, ChoiceMode::First).unwrap(), 1.0);
        assert_eq!(repetition_rate(&same, 0, ChoiceMode::Either).unwrap(), 1.0);

        let pairs: Vec<GateDecision> = (0..16)
            .map(|t| {
                let base = 2 * (t % 4);
                GateDecision::new(vec![
                    ExpertChoice { expert: base, weight: 0.6 },
                    ExpertChoice { expert: base + 1, weight: 0.4 },
                ])
            })
            .collect();
        let mut alt = RoutingTrace::new(same.header);
        alt.push(TraceDocument { doc_id: 0, label: None, layers: vec![pairs] }).unwrap();
        assert_eq!(repetition_rate(&alt, 0, ChoiceMode::First).unwrap(), 0.0);
        assert_eq!(repetition_rate(&alt, 0, ChoiceMode::Either).unwrap(), 0.0);
    }

    #[test]
    fn pairs_do_not_cross_documents() {
        let a = constant_trace(0, 1, 1).documents.remove(0);
        let mut b = constant_trace(0, 1, 1).documents.remove(0);
        b.doc_id = 1;
        let mut t = RoutingTrace::new(TraceHeader { n_layers: 1, num_experts: 8, top_k: 2 });
        t.push(a).unwrap();
        t.push(b).unwrap();
        assert!(matches!(repetition_rate(&t, 0, ChoiceMode::First), Err(Error::NoData(_))));
        assert!(repetition_rate(&t, 0, ChoiceMode::Second).is_err());
    }

    #[test]
    fn baselines() {
        assert_eq!(random_baseline(8, 2, ChoiceMode::First).unwrap(), 0.125);
        assert!((random_baseline(8, 2, ChoiceMode::Either).unwrap() - 13.0 / 28.0).abs() < 1e-15);
        assert!((random_baseline(4, 2, ChoiceMode::Either).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(random_baseline(3, 2, ChoiceMode::Either).unwrap(), 1.0);
        for n in 1..10 {
            let f = random_baseline(n, 1, ChoiceMode::First).unwrap();
            let e = random_baseline(n, 1, ChoiceMode::Either).unwrap();
            assert!((f - e).abs() < 1e-15 && (f - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!(matches!(random_baseline(2, 3, ChoiceMode::First), Err(Error::Domain(_))));
    }

    #[test]
    fn either_baseline_matches_monte_carlo() {
        // Independent estimate: two random 2-subsets of 4 experts intersect.
        use rand::seq::index::sample;
        let mut rng = crate::rng::stream(11, crate::rng::Stream::Eval);
        let trials = 1_000_000;
        let mut hits = 0u64;
        for _ in 0..trials {
            let a = sample(&mut rng, 4, 2).into_vec();
            let b = sample(&mut rng, 4, 2).into_vec();
            if a.iter().any(|x| b.contains(x)) {
                hits += 1;
            }
        }
        let mc = hits as f64 / trials as f64;
        assert!((mc - random_baseline(4, 2, ChoiceMode::Either).unwrap()).abs() < 2e-3, "{mc}");
    }

    #[test]
    fn either_rate_dominates_first_rate() {
        for seed in 0..5 {
            let t = planted_trace(8, 2, &[0.1, 0.5, 0.9], 4, 300, seed);
            for layer in 0..3 {
                let f = repetition_rate(&t, layer, ChoiceMode::First).unwrap();
                let e = repetition_rate(&t, layer, ChoiceMode::Either).unwrap();
                assert!(e >= f);
            }
        }
    }

    #[test]
    fn planted_rates_converge_at_root_n() {
        let target = 0.3;
        let err = |tokens| {
            (0..8)
                .map(|seed| {
                    let t = planted_trace(8, 2, &[target], 1, tokens, 100 + seed);
                    (repetition_rate(&t, 0, ChoiceMode::First).unwrap() - target).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        let small = err(2_000);
        let large = err(50_000);
        // 25x the pairs should shrink the error about 5x.
        assert!(large < small / 2.5, "{small} vs {large}");
    }

    #[test]
    fn profile_single_layer_has_one_row() {
        let t = planted_trace(8, 2, &[0.4], 1, 200, 3);
        let p = layer_profile(&t).unwrap();
        assert_eq!(p.rows.len(), 1);
        let tsv = p.to_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.lines().nth(1).unwrap().ends_with("0.125000\t0.464286"));
    }

    #[test]
    fn colorize_examples() {
        let d = |e: usize| {
            GateDecision::new(vec![
                ExpertChoice { expert: e, weight: 0.6 },
                ExpertChoice { expert: 7 - e, weight: 0.4 },
            ])
        };
        let mut t = RoutingTrace::new(TraceHeader { n_layers: 1, num_experts: 8, top_k: 2 });
        t.push(TraceDocument { doc_id: 0, label: None, layers: vec![vec![d(0), d(0), d(1)]] }).unwrap();
        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let doc = colorize_tokens(&t, 0, &tokens).unwrap();
        assert_eq!(
            doc.spans,
            vec![
                Span { expert: 0, text: "ab".into() },
                Span { expert: 1, text: "c".into() }
            ]
        );
        assert!(colorize_tokens(&t, 0, &tokens[..2]).is_err());

        let mut single = RoutingTrace::new(t.header);
        single.push(TraceDocument { doc_id: 0, label: None, layers: vec![vec![d(3)]] }).unwrap();
        assert_eq!(colorize_tokens(&single, 0, &tokens[..1]).unwrap().spans.len(), 1);
    }

    #[test]
    fn colorized_markup_strips_back_to_text() {
        let text = "if a < b && c > \"d\" { return x; }\n  tail";
        let tokens: Vec<String> = text.chars().map(|c| c.to_string()).collect();
        let t = planted_trace(8, 2, &[0.5], 1, tokens.len(), 9);
        let doc = colorize_tokens(&t, 0, &tokens).unwrap();
        assert_eq!(doc.plain_text(), text);
        assert_eq!(strip_ansi(&doc.to_ansi()), text);
        assert_eq!(strip_html(&doc.to_html()), text);
    }

    #[test]
    fn distribution_table_has_uniform_column() {
        let t = constant_trace(2, 5, 3);
        let tsv = distribution_tsv(&t, 0).unwrap();
        let mut lines = tsv.lines();
        assert_eq!(lines.next().unwrap(), "expert\tfirst\tsecond\teither\tuniform");
        assert_eq!(lines.nth(2).unwrap(), "2\t1.000000\t0.000000\t0.500000\t0.125000");
    }
}
