//! Data-parallel SGD driven through the engine, plus a single-process
//! reference with the same arithmetic.

use serde_json::json;

use super::tasks::{Batch, Dataset, Model, TrainTask};
use super::{Engine, EngineConfig, EngineError, EventLog, PlanSource};
use crate::adaptive::{plan, AdaptiveConfig, LayerStats, StatsCollector};
use crate::codec::rng::mix64;
use crate::collectives::reference_sum;
use crate::model::{CompressionPlan, GradientTensor, LayerFilter};
use crate::simnet::StepTrace;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// Accuracy for classifiers, R^2 for regression.
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean training loss per step (before the update).
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub final_metric: f64,
    pub params: Vec<Vec<f32>>,
    /// Hash of the parameters after every step.
    pub param_hashes: Vec<u64>,
    pub trace: StepTrace,
    pub events: EventLog,
    /// (first step the plan applies to, plan).
    pub plan_history: Vec<(usize, CompressionPlan)>,
}

pub fn params_hash(params: &[Vec<f32>]) -> u64 {
    params.iter().flatten().fold(0x9e37, |h, x| mix64(h ^ x.to_bits() as u64))
}

struct Setup {
    data: Dataset,
    model: Model,
    params: Vec<Vec<f32>>,
    velocity: Vec<Vec<f32>>,
}

fn setup(task: &TrainTask, nodes: usize) -> Result<Setup, EngineError> {
    task.validate(nodes)?;
    let data = task.dataset.generate();
    let model = Model::new(task.model, &data);
    let params = model.init(task.init_seed);
    let velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    Ok(Setup { data, model, params, velocity })
}

/// Per-node shard gradients for one step.
fn shard_grads(task: &TrainTask, s: &Setup, step: usize, nodes: usize) -> Result<(f64, Vec<Vec<Vec<f32>>>), EngineError> {
    let idx = task.batch_indices(step, s.data.train.len());
    let per = task.global_batch / nodes;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let batch = Batch::from_indices(&s.data.train, &idx[node * per..(node + 1) * per]);
        let (l, g) = s.model.loss_and_grad(&s.params, &batch);
        loss += l;
        grads.push(g);
    }
    let loss = loss / nodes as f64;
    if !loss.is_finite() {
        return Err(EngineError::Diverged { step, loss });
    }
    Ok((loss, grads))
}

fn eval_point(s: &Setup, step: usize, train_loss: f64) -> EvalPoint {
    let (test_loss, metric) = s.model.evaluate(&s.params, &s.data.test);
    EvalPoint { step, train_loss, test_loss, metric }
}

fn record_eval(s: &Setup, step: usize, loss: f64, evals: &mut Vec<EvalPoint>, events: &mut EventLog) {
    let e = eval_point(s, step, loss);
    events.push(step as u64, "eval", json!({"train_loss": e.train_loss, "test_loss": e.test_loss, "metric": e.metric}));
    evals.push(e);
}

/// Runs data-parallel SGD with gradients averaged by the engine.
pub fn train(task: &TrainTask, config: &EngineConfig) -> Result<TrainReport, EngineError> {
    let n = config.nodes();
    let mut s = setup(task, n)?;
    let mut engine = Engine::new(config.clone())?;
    let filter = LayerFilter::new(config.filter.clone())?;
    let adaptive: Option<AdaptiveConfig> = match &config.plan {
        PlanSource::Adaptive(a) => Some(a.clone()),
        PlanSource::Static(_) => None,
    };
    let base_plan = config.initial_plan();
    let compressed: Vec<usize> = (0..s.model.layers.len()).filter(|&i| filter.is_compressed(&s.model.layers[i])).collect();
    let mut collector = adaptive.as_ref().map(|a| StatsCollector::new(a.top_fraction));

    let mut events = EventLog::new();
    let mut plan_history = vec![(0, base_plan.clone())];
    let mut losses = Vec::with_capacity(task.steps);
    let mut evals = Vec::new();
    let mut hashes = Vec::with_capacity(task.steps);

    for step in 0..task.steps {
        if let Some(a) = &adaptive {
            if step % a.stats_period == 0 && step > 0 && engine.plan() != &base_plan {
                engine.set_plan(base_plan.clone())?;
                plan_history.push((step, base_plan.clone()));
                events.push(step as u64, "plan", json!({"source": "baseline"}));
            }
        }

        let (loss, grads) = shard_grads(task, &s, step, n)?;
        losses.push(loss);
        let submissions = grads
            .into_iter()
            .map(|g| s.model.layers.iter().cloned().zip(g).map(|(layer, values)| GradientTensor { layer, values }).collect())
            .collect();
        let out = engine.step_all(submissions)?;
        events.push(
            step as u64,
            "step",
            json!({"loss": loss, "bytes": out.trace.total_bytes_sent(), "virtual_time": out.trace.virtual_time, "buffers": out.buffers}),
        );
        let avg = &out.gradients[0];
        let refs: Vec<&[f32]> = avg.iter().map(|g| g.values.as_slice()).collect();
        task.optimizer.apply(&mut s.params, &mut s.velocity, &refs);
        hashes.push(params_hash(&s.params));

        if let (Some(a), Some(c)) = (&adaptive, collector.as_mut()) {
            let phase = step % a.stats_period;
            if phase < a.stats_window {
                let window: Vec<GradientTensor> = compressed.iter().map(|&i| avg[i].clone()).collect();
                c.observe(&window)?;
            }
            if phase + 1 == a.stats_window {
                let stats = c.finish()?;
                *c = StatsCollector::new(a.top_fraction);
                match plan(&stats, a) {
                    Ok(p) => {
                        if !p.within_budget {
                            events.push(step as u64, "warning", json!({"message": "budget not met at maximum palette bits", "error": p.error, "budget": p.budget}));
                        }
                        let bits: serde_json::Map<String, serde_json::Value> =
                            p.layers.iter().map(|l| (l.name.clone(), json!(l.bits))).collect();
                        events.push(
                            step as u64,
                            "plan",
                            json!({"source": "adaptive", "bits": bits, "error": p.error, "e4": p.e4, "budget": p.budget, "size_reduction": p.size_reduction()}),
                        );
                        let mut next = p.plan.clone();
                        next.defaults = base_plan.defaults;
                        engine.set_plan(next.clone())?;
                        plan_history.push((step + 1, next));
                    }
                    Err(e) => events.push(step as u64, "warning", json!({"message": format!("planner failed: {e}")})),
                }
            }
        }

        if (step + 1) % task.eval_every == 0 || step + 1 == task.steps {
            record_eval(&s, step + 1, loss, &mut evals, &mut events);
        }
    }
    let final_metric = evals.last().map_or(f64::NAN, |e| e.metric);
    Ok(TrainReport {
        losses,
        evals,
        final_metric,
        params: s.params,
        param_hashes: hashes,
        trace: engine.total_trace().clone(),
        events,
        plan_history,
    })
}

/// Training with the adaptive planner replacing the static plan.
pub fn run_adaptive_training(task: &TrainTask, config: &EngineConfig, adaptive: AdaptiveConfig) -> Result<TrainReport, EngineError> {
    let config = EngineConfig { plan: PlanSource::Adaptive(adaptive), ..config.clone() };
    train(task, &config)
}

/// Trains for `adaptive.stats_window` steps under the config's initial plan
/// and returns the window statistics of the compressed layers.
pub fn collect_training_stats(task: &TrainTask, config: &EngineConfig, adaptive: &AdaptiveConfig) -> Result<Vec<LayerStats>, EngineError> {
    adaptive.validate()?;
    let n = config.nodes();
    let mut s = setup(task, n)?;
    let config = EngineConfig { plan: PlanSource::Static(config.initial_plan()), ..config.clone() };
    let mut engine = Engine::new(config.clone())?;
    let filter = LayerFilter::new(config.filter.clone())?;
    let compressed: Vec<usize> = (0..s.model.layers.len()).filter(|&i| filter.is_compressed(&s.model.layers[i])).collect();
    let mut collector = StatsCollector::new(adaptive.top_fraction);
    for step in 0..adaptive.stats_window.min(task.steps.max(1)) {
        let (_, grads) = shard_grads(task, &s, step, n)?;
        let submissions = grads
            .into_iter()
            .map(|g| s.model.layers.iter().cloned().zip(g).map(|(layer, values)| GradientTensor { layer, values }).collect())
            .collect();
        let out = engine.step_all(submissions)?;
        let avg = &out.gradients[0];
        let refs: Vec<&[f32]> = avg.iter().map(|g| g.values.as_slice()).collect();
        task.optimizer.apply(&mut s.params, &mut s.velocity, &refs);
        let window: Vec<GradientTensor> = compressed.iter().map(|&i| avg[i].clone()).collect();
        collector.observe(&window)?;
    }
    Ok(collector.finish()?)
}

/// Single-process SGD over the same shards, averaging with the fixed-order
/// sum the lossless collectives reproduce.
pub fn reference_sgd(task: &TrainTask, nodes: usize) -> Result<TrainReport, EngineError> {
    let mut s = setup(task, nodes)?;
    let mut losses = Vec::with_capacity(task.steps);
    let mut evals = Vec::new();
    let mut hashes = Vec::with_capacity(task.steps);
    let mut events = EventLog::new();
    for step in 0..task.steps {
        let (loss, grads) = shard_grads(task, &s, step, nodes)?;
        losses.push(loss);
        let avg: Vec<Vec<f32>> = (0..s.model.layers.len())
            .map(|l| {
                let per_node: Vec<Vec<f32>> = grads.iter().map(|g| g[l].clone()).collect();
                reference_sum(&per_node).into_iter().map(|x| if nodes > 1 { x / nodes as f32 } else { x }).collect()
            })
            .collect();
        let refs: Vec<&[f32]> = avg.iter().map(|v| v.as_slice()).collect();
        task.optimizer.apply(&mut s.params, &mut s.velocity, &refs);
        hashes.push(params_hash(&s.params));
        if (step + 1) % task.eval_every == 0 || step + 1 == task.steps {
            record_eval(&s, step + 1, loss, &mut evals, &mut events);
        }
    }
    let final_metric = evals.last().map_or(f64::NAN, |e| e.metric);
    Ok(TrainReport {
        losses,
        evals,
        final_metric,
        params: s.params,
        param_hashes: hashes,
        trace: StepTrace::empty(nodes),
        events,
        plan_history: Vec::new(),
    })
}
