use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv::CsvTable;
use super::{run_err, AdaptArgs, CliError, NetSelect, Output, TrainArgs};
use crate::adaptive::{
    baseline_error_e4, plan_kmeans, plan_linear, read_stats, transformer_like_stats, uniform_error, write_stats, AdaptiveConfig, AdaptivePlan,
    LayerStats, PlannerKind,
};
use crate::collectives::Topology;
use crate::engine::{collect_training_stats, reference_sgd, run_adaptive_training, train as train_task, EngineConfig, TrainReport, TrainTask};
use crate::model::CompressionPlan;

/// A task preset name or a full task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskChoice {
    Preset(String),
    Custom(TrainTask),
}

impl TaskChoice {
    fn build(&self, seed: u64) -> Result<TrainTask, CliError> {
        match self {
            TaskChoice::Preset(name) => TrainTask::preset(name, seed)
                .ok_or_else(|| CliError::Usage(format!("unknown task `{name}` (expected one of {})", TrainTask::PRESETS.join(", ")))),
            TaskChoice::Custom(t) => Ok(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub net: NetSelect,
    pub task: TaskChoice,
    pub topology: Topology,
    pub bits: Vec<u8>,
    pub bucket: u32,
    pub steps: Option<usize>,
    /// When set, an adaptive run is added.
    pub adaptive: Option<AdaptiveConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetSelect::default(),
            task: TaskChoice::Preset("logistic".into()),
            topology: Topology::Sra,
            bits: vec![4],
            bucket: 128,
            steps: None,
            adaptive: None,
        }
    }
}

/// Adaptive settings scaled to a run of `steps` steps: three planning periods.
pub fn adaptive_for_steps(steps: usize) -> AdaptiveConfig {
    let window = 25.min(steps.max(1));
    AdaptiveConfig { stats_period: (steps / 3).max(window), stats_window: window, ..AdaptiveConfig::default() }
}

pub(super) fn train(file: &TrainConfig, args: &TrainArgs, seed: u64) -> Result<Output, CliError> {
    let mut cfg = file.clone();
    cfg.net.apply(&args.net)?;
    if let Some(t) = &args.task {
        cfg.task = TaskChoice::Preset(t.clone());
    }
    if let Some(t) = args.topology {
        cfg.topology = t;
    }
    if let Some(b) = &args.bits {
        cfg.bits = b.clone();
    }
    if args.steps.is_some() {
        cfg.steps = args.steps;
    }
    let mut task = cfg.task.build(seed)?;
    if let Some(s) = cfg.steps {
        task.steps = s;
        task.eval_every = task.eval_every.min(s.max(1));
    }
    if args.adaptive && cfg.adaptive.is_none() {
        cfg.adaptive = Some(adaptive_for_steps(task.steps));
    }
    let base = EngineConfig { topology: cfg.topology, net: cfg.net.resolve()?, seed, ..EngineConfig::default() };
    let nodes = base.nodes();
    task.validate(nodes).map_err(|e| CliError::Config(e.to_string()))?;

    let mut runs: Vec<(String, TrainReport)> = Vec::new();
    let lossless = train_task(&task, &base.clone().with_plan(CompressionPlan::lossless())).map_err(run_err)?;
    let reference = reference_sgd(&task, nodes).map_err(run_err)?;
    let matches_reference = lossless.param_hashes == reference.param_hashes;
    runs.push(("lossless".into(), lossless));
    for &bits in &cfg.bits {
        let plan = CompressionPlan::uniform(bits, cfg.bucket);
        plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
        runs.push((format!("q{bits}"), train_task(&task, &base.clone().with_plan(plan)).map_err(run_err)?));
    }
    if let Some(a) = &cfg.adaptive {
        runs.push(("adaptive".into(), run_adaptive_training(&task, &base, a.clone()).map_err(run_err)?));
    }

    let mut curves = CsvTable::new("train-curves", &["run", "step", "train_loss", "test_loss", "metric"]);
    let mut summary = CsvTable::new(
        "train-summary",
        &["run", "task", "nodes", "topology", "final_metric", "gap_vs_lossless", "within_1pct", "total_bytes_sent", "virtual_time_s", "matches_reference"],
    );
    let base_metric = runs[0].1.final_metric;
    let task_name = match &cfg.task {
        TaskChoice::Preset(n) => n.clone(),
        TaskChoice::Custom(_) => "custom".into(),
    };
    let mut files = Vec::new();
    for (name, r) in &runs {
        for e in &r.evals {
            curves.push(vec![name.clone(), e.step.to_string(), e.train_loss.to_string(), e.test_loss.to_string(), e.metric.to_string()]);
        }
        let gap = base_metric - r.final_metric;
        summary.push(vec![
            name.clone(),
            task_name.clone(),
            nodes.to_string(),
            cfg.topology.to_string(),
            r.final_metric.to_string(),
            gap.to_string(),
            (gap <= 0.01).to_string(),
            r.trace.total_bytes_sent().to_string(),
            r.trace.virtual_time.to_string(),
            if name == "lossless" { matches_reference.to_string() } else { String::new() },
        ]);
        files.push((format!("events_{name}.jsonl"), r.events.to_jsonl()));
    }
    let mut out = vec![("train_summary.csv".into(), summary.render()), ("train_curves.csv".into(), curves.render())];
    out.extend(files);
    Ok(Output { files: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub adaptive: AdaptiveConfig,
    /// Stats JSON; snapshots are read from the same path with a .bin extension.
    pub stats: Option<PathBuf>,
    /// Task preset for a live statistics run.
    pub task: Option<String>,
    pub nodes: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { adaptive: AdaptiveConfig::default(), stats: None, task: None, nodes: 8 }
    }
}

fn plan_row(table: &mut CsvTable, name: &str, p: &AdaptivePlan) {
    table.push(vec![
        name.into(),
        p.error.to_string(),
        p.e4.to_string(),
        p.budget.to_string(),
        (p.error <= p.budget).to_string(),
        p.promotions.to_string(),
        p.groups.to_string(),
        p.weighted_size().to_string(),
        p.size_reduction().to_string(),
    ]);
}

pub(super) fn adapt(file: &AdaptConfig, args: &AdaptArgs, seed: u64, out: Option<&Path>) -> Result<Output, CliError> {
    let mut cfg = file.clone();
    if let Some(s) = &args.stats {
        cfg.stats = Some(s.clone());
        cfg.task = None;
    }
    if let Some(t) = &args.task {
        cfg.task = Some(t.clone());
        cfg.stats = None;
    }
    if let Some(a) = &args.algo {
        cfg.adaptive.planner = a.parse().map_err(CliError::Usage)?;
    }
    if let Some(a) = args.alpha {
        cfg.adaptive.alpha = a;
    }
    if let Some(p) = &args.palette {
        cfg.adaptive.palette = p.clone();
    }
    if let Some(n) = args.nodes {
        cfg.nodes = n;
    }
    cfg.adaptive.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if args.save_stats && out.is_none() {
        return Err(CliError::Usage("--save-stats needs --out".into()));
    }

    let (source, stats): (String, Vec<LayerStats>) = match (&cfg.stats, &cfg.task) {
        (Some(path), _) => (path.display().to_string(), read_stats(path, &path.with_extension("bin")).map_err(run_err)?),
        (None, Some(name)) => {
            let task = TaskChoice::Preset(name.clone()).build(seed)?;
            let engine = EngineConfig { seed, ..EngineConfig::default() }.with_nodes(cfg.nodes);
            (format!("task:{name}"), collect_training_stats(&task, &engine, &cfg.adaptive).map_err(run_err)?)
        }
        (None, None) => ("synthetic:transformer_like".into(), transformer_like_stats(seed, cfg.adaptive.top_fraction)),
    };
    if let (true, Some(dir)) = (args.save_stats, out) {
        std::fs::create_dir_all(dir).map_err(run_err)?;
        write_stats(&dir.join("stats.json"), &dir.join("stats.bin"), &stats).map_err(run_err)?;
    }

    let linear = plan_linear(&stats, &cfg.adaptive).map_err(run_err)?;
    let kmeans = plan_kmeans(&stats, &cfg.adaptive).map_err(run_err)?;
    let chosen = match cfg.adaptive.planner {
        PlannerKind::Kmeans => &kmeans,
        PlannerKind::Linear => &linear,
    };

    let mut summary = CsvTable::new(
        "adapt-summary",
        &["planner", "error", "e4", "budget", "within_budget", "promotions", "groups", "weighted_size", "size_reduction_vs_4bit"],
    );
    let e4 = baseline_error_e4(&stats, cfg.adaptive.bucket).map_err(run_err)?;
    let four = uniform_error(&stats, 4, cfg.adaptive.bucket).map_err(run_err)?;
    let size: f64 = stats.iter().map(|s| 4.0 * s.size() as f64).sum();
    summary.push(vec![
        "uniform4".into(),
        four.to_string(),
        e4.to_string(),
        (cfg.adaptive.alpha * e4).to_string(),
        (four <= cfg.adaptive.alpha * e4).to_string(),
        "0".into(),
        "1".into(),
        size.to_string(),
        "1".into(),
    ]);
    plan_row(&mut summary, "linear", &linear);
    plan_row(&mut summary, "kmeans", &kmeans);

    let mut layers = CsvTable::new("adapt-layers", &["layer", "size", "norm", "top_norm", "bits", "bucket", "group"]);
    for (l, s) in chosen.layers.iter().zip(&stats) {
        layers.push(vec![
            l.name.clone(),
            l.size.to_string(),
            s.norm.to_string(),
            s.top_norm.to_string(),
            l.bits.to_string(),
            l.bucket.to_string(),
            l.group.to_string(),
        ]);
    }
    let report = serde_json::json!({
        "source": source,
        "planner": cfg.adaptive.planner,
        "alpha": cfg.adaptive.alpha,
        "palette": cfg.adaptive.palette,
        "error": chosen.error,
        "budget": chosen.budget,
        "within_budget": chosen.within_budget,
        "size_reduction_vs_4bit": chosen.size_reduction(),
        "warning": (!chosen.within_budget).then_some("budget not met with every layer at the top of the palette"),
    });
    Ok(Output {
        files: vec![
            ("adapt_summary.csv".into(), summary.render()),
            ("adapt_layers.csv".into(), layers.render()),
            ("plan.json".into(), chosen.plan.to_json() + "\n"),
            ("adapt_report.json".into(), serde_json::to_string_pretty(&report).expect("json") + "\n"),
        ],
    })
}
