use cgx::adaptive::AdaptiveConfig;
use cgx::codec::QuantParams;
use cgx::collectives::{reference_sum, Topology};
use cgx::engine::{reference_sgd, run_adaptive_training, train, Engine, EngineConfig, TrainTask};
use cgx::model::{CompressionPlan, GradientTensor, LayerKind, LayerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short(mut task: TrainTask, steps: usize) -> TrainTask {
    task.steps = steps;
    task.eval_every = steps;
    task
}

#[test]
fn lossless_training_is_bitwise_single_process_sgd() {
    for (task, nodes) in [(short(TrainTask::mlp(1), 150), 8), (short(TrainTask::logistic(2), 100), 4), (short(TrainTask::embedding_bag(3), 60), 8)] {
        for topology in Topology::ALL {
            let cfg = EngineConfig { topology, ..EngineConfig::default() }.with_nodes(nodes).with_plan(CompressionPlan::lossless());
            let got = train(&task, &cfg).unwrap();
            let want = reference_sgd(&task, nodes).unwrap();
            assert_eq!(got.param_hashes, want.param_hashes, "{topology} nodes={nodes}");
            assert_eq!(got.params, want.params);
            assert_eq!(got.losses, want.losses);
        }
    }
}

#[test]
fn small_fused_buffers_do_not_change_lossless_training() {
    let task = short(TrainTask::mlp(0), 40);
    let mut cfg = EngineConfig::default().with_nodes(4).with_plan(CompressionPlan::lossless());
    cfg.buffer_bytes = 5000;
    let got = train(&task, &cfg).unwrap();
    assert_eq!(got.param_hashes, reference_sgd(&task, 4).unwrap().param_hashes);
}

#[test]
fn four_bit_mlp_matches_lossless_accuracy() {
    let task = TrainTask::mlp(0);
    let cfg = EngineConfig::default().with_nodes(8);
    let lossless = train(&task, &cfg.clone().with_plan(CompressionPlan::lossless())).unwrap();
    let q4 = train(&task, &cfg.with_plan(CompressionPlan::uniform(4, 128))).unwrap();
    assert!(lossless.final_metric - q4.final_metric <= 0.01, "{} vs {}", lossless.final_metric, q4.final_metric);
    assert!(q4.trace.total_bytes_sent() * 4 < lossless.trace.total_bytes_sent());
}

#[test]
fn one_bit_is_worse_than_four_bit() {
    let task = short(TrainTask::mlp(0), 600);
    let cfg = EngineConfig::default().with_nodes(8);
    let q4 = train(&task, &cfg.clone().with_plan(CompressionPlan::uniform(4, 128))).unwrap();
    let q1 = train(&task, &cfg.with_plan(CompressionPlan::uniform(1, 128))).unwrap();
    assert!(q1.final_metric + 0.02 < q4.final_metric, "1-bit {} vs 4-bit {}", q1.final_metric, q4.final_metric);
}

#[test]
fn training_is_deterministic() {
    let task = short(TrainTask::logistic(5), 50);
    let cfg = EngineConfig::default().with_nodes(8).with_plan(CompressionPlan::uniform(4, 128));
    let a = train(&task, &cfg).unwrap();
    let b = train(&task, &cfg).unwrap();
    assert_eq!(a.param_hashes, b.param_hashes);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.events.to_jsonl(), b.events.to_jsonl());
}

#[test]
fn singleton_palette_equals_static_four_bit() {
    let task = short(TrainTask::embedding_bag(0), 90);
    let cfg = EngineConfig::default().with_nodes(8);
    let adaptive = AdaptiveConfig { palette: vec![4], stats_period: 30, stats_window: 5, ..AdaptiveConfig::default() };
    let a = run_adaptive_training(&task, &cfg, adaptive).unwrap();
    let s = train(&task, &cfg.with_plan(CompressionPlan::uniform(4, 128))).unwrap();
    assert_eq!(a.param_hashes, s.param_hashes);
    assert_eq!(a.trace.total_bytes_sent(), s.trace.total_bytes_sent());
    assert!(a.plan_history.len() >= 2);
}

#[test]
fn adaptive_plans_swap_at_step_boundaries() {
    let task = short(TrainTask::embedding_bag(0), 100);
    let cfg = EngineConfig::default().with_nodes(4);
    let adaptive = AdaptiveConfig { stats_period: 50, stats_window: 10, ..AdaptiveConfig::default() };
    let r = run_adaptive_training(&task, &cfg, adaptive).unwrap();
    // baseline at 0, plan after the window, baseline again at 50, plan after its window
    let starts: Vec<usize> = r.plan_history.iter().map(|h| h.0).collect();
    assert_eq!(starts, vec![0, 10, 50, 60]);
    let plans: Vec<_> = r.events.of_kind("plan").filter(|e| e.payload["source"] == "adaptive").collect();
    assert_eq!(plans.len(), 2);
    for (p, (_, applied)) in plans.iter().zip([&r.plan_history[1], &r.plan_history[3]]) {
        assert!(p.payload["error"].as_f64().unwrap() <= p.payload["budget"].as_f64().unwrap());
        for layer in ["embed.weight", "fc1.weight", "fc2.weight"] {
            assert_eq!(p.payload["bits"][layer].as_u64().unwrap(), applied.resolve(layer).bits as u64);
        }
    }
    // the embedding table is the large, low-norm layer
    assert!(r.plan_history[1].1.resolve("embed.weight").bits < 4);
}

#[test]
fn quantized_average_error_bound_eight_nodes() {
    let (n, d) = (8, 1 << 14);
    let layer = LayerSpec::new("w", d, LayerKind::Weight);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grads: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
    let s = QuantParams::default().levels() as f64;
    let max_norm = grads
        .iter()
        .flat_map(|g| g.chunks(128).map(|b| b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()))
        .fold(0.0, f64::max);
    let mean: Vec<f64> = reference_sum(&grads).iter().map(|&x| x as f64 / n as f64).collect();
    for topology in [Topology::Sra] {
        let mut engine = Engine::new(EngineConfig { topology, seed: 3, ..EngineConfig::default() }.with_nodes(n)).unwrap();
        let out = engine
            .step_all(grads.iter().map(|g| vec![GradientTensor { layer: layer.clone(), values: g.clone() }]).collect())
            .unwrap();
        let avg = &out.gradients[0][0].values;
        for node in &out.gradients {
            assert_eq!(&node[0].values, avg);
        }
        let worst = avg.iter().zip(&mean).map(|(&a, &m)| (a as f64 - m).abs()).fold(0.0, f64::max);
        assert!(worst <= 2.0 / s * max_norm, "{worst} > {}", 2.0 / s * max_norm);
        assert!(worst > 0.0);
    }
}

#[test]
fn filtered_layers_are_exact_under_quantization() {
    let task = short(TrainTask::mlp(4), 5);
    let cfg = EngineConfig::default().with_nodes(8);
    let mut engine = Engine::new(cfg).unwrap();
    let layers = [LayerSpec::new("fc.bias", 128, LayerKind::Bias), LayerSpec::new("fc.weight", 8192, LayerKind::Weight)];
    let mut rng = ChaCha8Rng::seed_from_u64(task.init_seed);
    let grads: Vec<Vec<GradientTensor>> = (0..8)
        .map(|_| {
            layers.iter().map(|l| GradientTensor { layer: l.clone(), values: (0..l.element_count).map(|_| rng.gen_range(-1.0f32..1.0)).collect() }).collect()
        })
        .collect();
    let bias: Vec<Vec<f32>> = grads.iter().map(|g| g[0].values.clone()).collect();
    let want: Vec<f32> = reference_sum(&bias).iter().map(|&x| x / 8.0).collect();
    let out = engine.step_all(grads).unwrap();
    assert_eq!(out.gradients[3][0].values, want);
}
