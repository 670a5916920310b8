//! Count-based replay of routing traces under expert parallelism and
//! expert caching.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::trace::{RoutingTrace, TraceDocument};

/// Assignment of every expert to a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    device_of: Vec<usize>,
    num_devices: usize,
}

impl Placement {
    pub fn new(device_of: Vec<usize>, num_devices: usize) -> Result<Self> {
        if num_devices == 0 {
            return Err(Error::Config("placement needs at least one device".into()));
        }
        if let Some(&d) = device_of.iter().find(|&&d| d >= num_devices) {
            return Err(Error::Config(format!("device {d} out of range for {num_devices} devices")));
        }
        Ok(Self { device_of, num_devices })
    }

    /// Expert `e` lives on device `e % num_devices`.
    pub fn round_robin(num_experts: usize, num_devices: usize) -> Result<Self> {
        Self::new((0..num_experts).map(|e| e % num_devices.max(1)).collect(), num_devices)
    }

    /// Consecutive blocks of `experts_per_device` experts share a device.
    pub fn contiguous(num_experts: usize, experts_per_device: usize) -> Result<Self> {
        if experts_per_device == 0 {
            return Err(Error::Config("experts_per_device must be positive".into()));
        }
        let d = num_experts.div_ceil(experts_per_device);
        Self::new((0..num_experts).map(|e| e / experts_per_device).collect(), d)
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn num_experts(&self) -> usize {
        self.device_of.len()
    }

    pub fn device_of(&self, expert: usize) -> usize {
        self.device_of[expert]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub layer: usize,
    pub device_counts: Vec<u64>,
    /// Busiest device over the mean device load.
    pub imbalance: f64,
    /// Share of assignments whose expert is not on the token's home device.
    pub cross_device_fraction: f64,
}

impl LoadReport {
    pub fn total(&self) -> u64 {
        self.device_counts.iter().sum()
    }
}

/// Replays one layer; token `t` of the layer stream has home device `t % d`.
pub fn simulate_ep(trace: &RoutingTrace, placement: &Placement, layer: usize) -> Result<LoadReport> {
    let h = trace.header;
    if placement.num_experts() != h.num_experts {
        return Err(Error::Config(format!(
            "placement covers {} experts, trace has {}",
            placement.num_experts(),
            h.num_experts
        )));
    }
    if layer >= h.n_layers {
        return Err(Error::Input(format!("layer {layer} out of range for {} layers", h.n_layers)));
    }
    if trace.is_empty() {
        return Err(Error::NoData("trace has no tokens".into()));
    }
    let d = placement.num_devices();
    let mut counts = vec![0u64; d];
    let mut remote = 0u64;
    for (t, decision) in trace.layer_stream(layer).enumerate() {
        let home = t % d;
        for e in decision.experts() {
            let dev = placement.device_of(e);
            counts[dev] += 1;
            if dev != home {
                remote += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let mean = total as f64 / d as f64;
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    Ok(LoadReport {
        layer,
        device_counts: counts,
        imbalance: max / mean,
        cross_device_fraction: remote as f64 / total as f64,
    })
}

pub fn load_reports_tsv(reports: &[LoadReport]) -> String {
    let mut s = String::from("layer\tdevice\tassignments\timbalance\tcross_device_fraction\n");
    for r in reports {
        for (dev, c) in r.device_counts.iter().enumerate() {
            let _ = writeln!(s, "{}\t{dev}\t{c}\t{:.6}\t{:.6}", r.layer, r.imbalance, r.cross_device_fraction);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Lru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub capacity: usize,
    pub policy: CachePolicy,
}

impl CacheConfig {
    pub fn lru(capacity: usize) -> Self {
        Self {
            capacity,
            policy: CachePolicy::Lru,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheReport {
    pub hits: u64,
    pub assignments: u64,
}

impl CacheReport {
    pub fn hit_rate(&self) -> f64 {
        if self.assignments == 0 {
            0.0
        } else {
            self.hits as f64 / self.assignments as f64
        }
    }
}

/// LRU replay over an arbitrary expert stream.
pub fn replay_lru(stream: impl IntoIterator<Item = usize>, capacity: usize) -> CacheReport {
    // Most recently used at the back; capacities are tiny so a scan is fine.
    let mut resident: Vec<usize> = Vec::with_capacity(capacity + 1);
    let mut report = CacheReport { hits: 0, assignments: 0 };
    for e in stream {
        report.assignments += 1;
        if let Some(pos) = resident.iter().position(|&r| r == e) {
            report.hits += 1;
            resident.remove(pos);
        } else if resident.len() == capacity {
            resident.remove(0);
        }
        resident.push(e);
    }
    report
}

/// Replays the layer's assignments, token by token and rank by rank.
pub fn simulate_cache(trace: &RoutingTrace, layer: usize, cache: CacheConfig) -> Result<CacheReport> {
    if cache.capacity == 0 {
        return Err(Error::Config("cache capacity must be at least 1".into()));
    }
    if layer >= trace.header.n_layers {
        return Err(Error::Input(format!("layer {layer} out of range")));
    }
    let CachePolicy::Lru = cache.policy;
    Ok(replay_lru(
        trace.layer_stream(layer).flat_map(|d| d.experts().collect::<Vec<_>>()),
        cache.capacity,
    ))
}

/// Permutes token order inside each document; all layers of a token move together.
pub fn shuffle_trace(trace: &RoutingTrace, seed: u64) -> RoutingTrace {
    let mut out = RoutingTrace::new(trace.header);
    for (i, doc) in trace.documents.iter().enumerate() {
        let len = doc.layers.first().map_or(0, Vec::len);
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng::substream(seed, Stream::Shuffle, i as u64));
        let layers = doc
            .layers
            .iter()
            .map(|l| perm.iter().map(|&t| l[t].clone()).collect())
            .collect();
        out.push(TraceDocument {
            doc_id: doc.doc_id,
            label: doc.label.clone(),
            layers,
        })
        .expect("a permutation keeps the document well formed");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::synthetic::{planted_trace, run_length_trace, uniform_trace};
    use crate::analytics::{expert_distribution, random_baseline, repetition_rate, ChoiceMode};
    use crate::moe::{ExpertChoice, GateDecision};
    use crate::trace::TraceHeader;

    fn header(n: usize, k: usize) -> TraceHeader {
        TraceHeader {
            n_layers: 1,
            num_experts: n,
            top_k: k,
        }
    }

    fn single_doc(n: usize, decisions: Vec<GateDecision>) -> RoutingTrace {
        let k = decisions[0].k();
        let mut t = RoutingTrace::new(header(n, k));
        t.push(TraceDocument { doc_id: 0, label: None, layers: vec![decisions] }).unwrap();
        t
    }

    fn k1(e: usize) -> GateDecision {
        GateDecision::new(vec![ExpertChoice { expert: e, weight: 1.0 }])
    }

    #[test]
    fn uniform_routing_is_balanced() {
        let t = uniform_trace(header(8, 2), 1, 800, 1);
        let r = simulate_ep(&t, &Placement::round_robin(8, 8).unwrap(), 0).unwrap();
        assert_eq!(r.total(), 1600);
        assert!(r.imbalance <= 1.1, "{}", r.imbalance);
        assert!(r.device_counts.iter().all(|&c| (150..=250).contains(&c)));
    }

    #[test]
    fn degenerate_routing_loads_one_device() {
        let d = GateDecision::new(vec![
            ExpertChoice { expert: 0, weight: 0.5 },
            ExpertChoice { expert: 1, weight: 0.5 },
        ]);
        let t = single_doc(8, vec![d; 50]);
        let p = Placement::contiguous(8, 2).unwrap();
        let r = simulate_ep(&t, &p, 0).unwrap();
        assert_eq!(r.device_counts[0], 100);
        assert!((r.imbalance - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_device() {
        let t = uniform_trace(header(8, 2), 2, 30, 2);
        let r = simulate_ep(&t, &Placement::round_robin(8, 1).unwrap(), 0).unwrap();
        assert_eq!(r.imbalance, 1.0);
        assert_eq!(r.cross_device_fraction, 0.0);
    }

    #[test]
    fn incomplete_placement_is_rejected() {
        let t = uniform_trace(header(8, 2), 1, 10, 0);
        let p = Placement::round_robin(6, 2).unwrap();
        assert!(matches!(simulate_ep(&t, &p, 0), Err(Error::Config(_))));
        assert!(Placement::new(vec![0, 3], 2).is_err());
    }

    #[test]
    fn device_relabeling_is_invariant() {
        let t = planted_trace(8, 2, &[0.5], 2, 400, 5);
        let a = Placement::round_robin(8, 4).unwrap();
        // Rotate device labels by one and home devices follow the same rotation.
        let b = Placement::new((0..8).map(|e| (e + 1) % 4).collect(), 4).unwrap();
        let ra = simulate_ep(&t, &a, 0).unwrap();
        let rb = simulate_ep(&t, &b, 0).unwrap();
        assert_eq!(ra.imbalance, rb.imbalance);
        let mut ca = ra.device_counts.clone();
        let mut cb = rb.device_counts.clone();
        ca.sort_unstable();
        cb.sort_unstable();
        assert_eq!(ca, cb);
    }

    #[test]
    fn full_capacity_only_misses_cold() {
        let t = uniform_trace(header(8, 2), 1, 500, 3);
        let r = simulate_cache(&t, 0, CacheConfig::lru(8)).unwrap();
        assert_eq!(r.assignments, 1000);
        assert_eq!(r.hits, 1000 - 8);
    }

    #[test]
    fn alternating_stream_never_hits_with_one_slot() {
        let t = single_doc(2, (0..100).map(|i| k1(i % 2)).collect());
        assert_eq!(simulate_cache(&t, 0, CacheConfig::lru(1)).unwrap().hits, 0);
        assert!(simulate_cache(&t, 0, CacheConfig::lru(0)).is_err());
    }

    #[test]
    fn lru_evicts_least_recent() {
        // a b a c b: with two slots, c evicts b, so the final b misses.
        let r = replay_lru([0, 1, 0, 2, 1], 2);
        assert_eq!(r.hits, 1);
    }

    #[test]
    fn locality_beats_shuffle() {
        let t = run_length_trace(8, 8, 20_000, 7);
        let local = simulate_cache(&t, 0, CacheConfig::lru(2)).unwrap().hit_rate();
        let shuffled = simulate_cache(&shuffle_trace(&t, 7), 0, CacheConfig::lru(2)).unwrap().hit_rate();
        assert!(local - shuffled >= 0.3, "{local} vs {shuffled}");
    }

    #[test]
    fn hit_rate_is_monotone_in_capacity() {
        let t = planted_trace(8, 2, &[0.4], 3, 300, 8);
        let mut last = 0.0;
        for c in 1..=8 {
            let h = simulate_cache(&t, 0, CacheConfig::lru(c)).unwrap().hit_rate();
            assert!(h >= last);
            last = h;
        }
    }

    #[test]
    fn shuffle_preserves_marginals_and_is_seeded() {
        let t = planted_trace(8, 2, &[0.8], 3, 200, 9);
        let s = shuffle_trace(&t, 1);
        for m in [ChoiceMode::First, ChoiceMode::Second, ChoiceMode::Either] {
            assert_eq!(expert_distribution(&t, 0, m).unwrap(), expert_distribution(&s, 0, m).unwrap());
        }
        assert_eq!(s, shuffle_trace(&t, 1));
        assert_ne!(s, shuffle_trace(&t, 2));
    }

    #[test]
    fn shuffle_destroys_planted_locality() {
        let t = planted_trace(8, 2, &[0.6], 1, 100_001, 10);
        let s = shuffle_trace(&t, 10);
        let r = repetition_rate(&s, 0, ChoiceMode::First).unwrap();
        assert!((r - random_baseline(8, 2, ChoiceMode::First).unwrap()).abs() <= 0.02, "{r}");
    }

    #[test]
    fn tsv_has_row_per_device() {
        let t = uniform_trace(header(4, 1), 1, 40, 0);
        let r = simulate_ep(&t, &Placement::round_robin(4, 2).unwrap(), 0).unwrap();
        assert_eq!(load_reports_tsv(&[r]).lines().count(), 3);
    }
}
