use smoe::rng::{stream, Stream};
use smoe::train::{gradient_check, min_router_gap, GradCheckOptions, GradCheckReport, TrainExample};
use smoe::{ModelConfig, TransformerModel};

fn toy(num_experts: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        dim: 8,
        n_layers: 2,
        head_dim: 4,
        hidden_dim: 12,
        n_heads: 2,
        n_kv_heads: 1,
        context_len: 16,
        vocab_size: 11,
        num_experts,
        top_k_experts: top_k,
    }
}

fn model(cfg: ModelConfig, seed: u64) -> TransformerModel<f64> {
    TransformerModel::random_with_std(cfg, 0.3, &mut stream(seed, Stream::Init)).unwrap()
}

fn batch() -> Vec<TrainExample> {
    let mut partial = TrainExample::next_token(&[7, 7, 2, 5, 1, 0]);
    partial.targets[1] = None;
    vec![TrainExample::next_token(&[1, 4, 2, 9, 3, 3, 0, 10, 5]), partial]
}

fn show(report: &GradCheckReport) {
    if let Some(w) = report.worst() {
        println!(
            "worst {} err {:.3e}, router gap {:.3e}",
            w.name, w.max_rel_error, report.router_gap
        );
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let batch = batch();
    let mut checked = 0;
    for seed in 0..6 {
        let m = model(toy(4, 2), seed);
        if min_router_gap(&m, &batch).unwrap() <= 1e-3 {
            continue;
        }
        let report = gradient_check(&m, &batch, &GradCheckOptions::default()).unwrap();
        show(&report);
        assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        assert!(report.tensors.iter().all(|t| t.checked > 0 || t.skipped > 0));
        checked += 1;
    }
    assert!(checked >= 4);
}

#[test]
fn auxiliary_loss_gradients() {
    let m = model(toy(4, 2), 21);
    let opts = GradCheckOptions {
        aux_loss_coef: 0.05,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(&m, &batch(), &opts).unwrap();
    show(&report);
    assert!(report.passed());
}

#[test]
fn idle_experts_get_exactly_zero_gradient() {
    // Two tokens choose at most four of eight experts per layer.
    let batch = vec![TrainExample::next_token(&[3, 8, 1])];
    let m = model(toy(8, 2), 4);
    let (_, trace) = m.forward(&batch[0].tokens).unwrap();
    let report = gradient_check(&m, &batch, &GradCheckOptions::default()).unwrap();
    assert!(report.passed());
    let mut idle = 0;
    for layer in 0..2 {
        for e in 0..8 {
            let used = trace.layer_stream(layer).any(|d| d.contains(e));
            for w in ["w1", "w3", "w2"] {
                let name = format!("layers.{layer}.experts.{e}.{w}");
                let t = report.tensors.iter().find(|t| t.name == name).unwrap();
                assert_eq!(t.all_zero, !used, "{name}");
            }
            idle += usize::from(!used);
        }
    }
    assert!(idle >= 8);
}

#[test]
fn single_expert_router_has_zero_gradient() {
    let m = model(toy(1, 1), 2);
    let report = gradient_check(&m, &batch(), &GradCheckOptions::default()).unwrap();
    assert!(report.passed());
    assert_eq!(report.router_gap, f64::INFINITY);
    for t in report.tensors.iter().filter(|t| t.name.ends_with("router")) {
        assert!(t.all_zero, "{}", t.name);
    }
}

#[test]
fn dense_routing_gradients() {
    // K = n keeps every expert active; the router sees the full softmax.
    let m = model(toy(3, 3), 8);
    let report = gradient_check(&m, &batch(), &GradCheckOptions::default()).unwrap();
    assert!(report.passed());
    assert!(report.tensors.iter().all(|t| t.skipped == 0));
}
