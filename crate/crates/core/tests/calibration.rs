use dsafdet::checkpoint;
use dsafdet::model::{Ablation, Detector, ModelConfig, INPUT_SIZE};
use dsafdet::profiler::{deviation, profile, ProfileReport, BASELINE_PARAMS, TARGET_GFLOPS, TARGET_PARAMS};

fn profiled(a: Ablation) -> ProfileReport {
    let (m, store) = Detector::new::<f32>(ModelConfig::default().with_ablation(a), 0).unwrap();
    let r = profile(&m, &store, &[1, 3, INPUT_SIZE, INPUT_SIZE]).unwrap();
    let elements: usize = checkpoint::decode(&checkpoint::store_bytes(&store))
        .unwrap()
        .iter()
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(r.param_count + r.buffer_count, elements);
    assert_eq!(r.model_size_bytes, checkpoint::store_bytes(&store).len());
    r
}

#[test]
fn default_model_hits_size_and_cost_targets() {
    let r = profiled(Ablation::Full);
    assert!(deviation(r.param_count as f64, TARGET_PARAMS).abs() <= 0.05, "{}", r.param_count);
    assert!(deviation(r.gflops(), TARGET_GFLOPS).abs() <= 0.10, "{}", r.gflops());
}

#[test]
fn baseline_hits_size_target() {
    let r = profiled(Ablation::Baseline);
    assert!(deviation(r.param_count as f64, BASELINE_PARAMS).abs() <= 0.10, "{}", r.param_count);
}

#[test]
fn each_module_shrinks_the_model() {
    let p: Vec<(Ablation, ProfileReport)> = Ablation::ALL.iter().map(|&a| (a, profiled(a))).collect();
    let get = |a: Ablation| p.iter().find(|(x, _)| *x == a).unwrap().1.clone();
    let (full, base) = (get(Ablation::Full), get(Ablation::Baseline));
    for a in Ablation::ALL {
        let r = get(a);
        assert!(r.param_count >= full.param_count && r.param_count <= base.param_count, "{a}");
        assert!(r.flops >= full.flops && r.flops <= base.flops, "{a}");
    }
    let mut counts: Vec<usize> = p.iter().map(|(_, r)| r.param_count).collect();
    counts.sort_unstable();
    counts.dedup();
    assert_eq!(counts.len(), 4);
}
