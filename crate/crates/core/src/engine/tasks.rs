//! Synthetic datasets and small models for data-parallel training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::model::{LayerKind, LayerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Gaussian blobs: each class is a mixture of `clusters_per_class` unit
    /// Gaussians whose centers are about `separation` apart.
    Blobs { classes: usize, dim: usize, clusters_per_class: usize, separation: f64, train: usize, test: usize, seed: u64 },
    /// y = w.x + noise.
    Regression { dim: usize, noise: f64, train: usize, test: usize, seed: u64 },
    /// Token bags: each position is drawn from the class's signal tokens with
    /// probability `signal`, otherwise uniformly from the vocabulary.
    Tokens { vocab: usize, length: usize, classes: usize, signal: f64, train: usize, test: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Dense(Vec<f32>),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub inputs: Vec<Input>,
    /// Class index for classification, target value for regression.
    pub labels: Vec<f32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    /// 0 for regression.
    pub classes: usize,
    pub dim: usize,
    pub vocab: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl DatasetSpec {
    pub fn generate(&self) -> Dataset {
        match *self {
            DatasetSpec::Blobs { classes, dim, clusters_per_class, separation, train, test, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sigma = separation / (2.0 * dim as f64).sqrt();
                let centers: Vec<Vec<f64>> =
                    (0..classes * clusters_per_class.max(1)).map(|_| (0..dim).map(|_| normal(&mut rng) * sigma).collect()).collect();
                let mut split = |count: usize| {
                    let mut s = Split::default();
                    for _ in 0..count {
                        let c = rng.gen_range(0..centers.len());
                        let x = centers[c].iter().map(|&m| (m + normal(&mut rng)) as f32).collect();
                        s.inputs.push(Input::Dense(x));
                        s.labels.push((c % classes) as f32);
                    }
                    s
                };
                let (train, test) = (split(train), split(test));
                Dataset { train, test, classes, dim, vocab: 0 }
            }
            DatasetSpec::Regression { dim, noise, train, test, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w: Vec<f64> = (0..dim).map(|_| normal(&mut rng) / (dim as f64).sqrt()).collect();
                let mut split = |count: usize| {
                    let mut s = Split::default();
                    for _ in 0..count {
                        let x: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
                        let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise * normal(&mut rng);
                        s.inputs.push(Input::Dense(x.iter().map(|&v| v as f32).collect()));
                        s.labels.push(y as f32);
                    }
                    s
                };
                let (train, test) = (split(train), split(test));
                Dataset { train, test, classes: 0, dim, vocab: 0 }
            }
            DatasetSpec::Tokens { vocab, length, classes, signal, train, test, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let per_class = (vocab / (4 * classes)).max(1);
                let signals: Vec<Vec<u32>> =
                    (0..classes).map(|_| (0..per_class).map(|_| rng.gen_range(0..vocab as u32)).collect()).collect();
                let mut split = |count: usize| {
                    let mut s = Split::default();
                    for _ in 0..count {
                        let c = rng.gen_range(0..classes);
                        let toks = (0..length)
                            .map(|_| {
                                if rng.gen::<f64>() < signal {
                                    signals[c][rng.gen_range(0..per_class)]
                                } else {
                                    rng.gen_range(0..vocab as u32)
                                }
                            })
                            .collect();
                        s.inputs.push(Input::Tokens(toks));
                        s.labels.push(c as f32);
                    }
                    s
                };
                let (train, test) = (split(train), split(test));
                Dataset { train, test, classes, dim: 0, vocab }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Softmax regression for classification, least squares for regression.
    Linear,
    Mlp { hidden: usize },
    /// Mean of token embeddings followed by `depth` ReLU layers of width
    /// `hidden` and a linear classifier.
    EmbeddingBag {
        dim: usize,
        hidden: usize,
        #[serde(default = "one")]
        depth: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
}

impl Sgd {
    /// velocity = momentum * velocity + grad; param -= lr * velocity.
    pub fn apply(&self, params: &mut [Vec<f32>], velocity: &mut [Vec<f32>], grads: &[&[f32]]) {
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTask {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: Sgd,
    pub global_batch: usize,
    pub steps: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_eval_every() -> usize {
    100
}

impl TrainTask {
    /// Softmax regression on 2048-dimensional blobs.
    pub fn logistic(seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::Blobs { classes: 4, dim: 2048, clusters_per_class: 1, separation: 4.0, train: 8192, test: 4096, seed },
            model: ModelSpec::Linear,
            optimizer: Sgd { lr: 0.05, momentum: 0.9 },
            global_batch: 64,
            steps: 2000,
            eval_every: 250,
            init_seed: seed,
        }
    }

    /// Two-layer perceptron on overlapping multi-cluster blobs.
    pub fn mlp(seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::Blobs { classes: 4, dim: 64, clusters_per_class: 3, separation: 4.0, train: 4096, test: 2048, seed },
            model: ModelSpec::Mlp { hidden: 128 },
            optimizer: Sgd { lr: 0.05, momentum: 0.9 },
            global_batch: 64,
            steps: 2000,
            eval_every: 250,
            init_seed: seed,
        }
    }

    /// Embedding-bag classifier with a large, sparsely-updated embedding table.
    pub fn embedding_bag(seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::Tokens { vocab: 4096, length: 16, classes: 8, signal: 0.4, train: 8192, test: 2048, seed },
            model: ModelSpec::EmbeddingBag { dim: 32, hidden: 128, depth: 2 },
            optimizer: Sgd { lr: 0.2, momentum: 0.9 },
            global_batch: 64,
            steps: 750,
            eval_every: 250,
            init_seed: seed,
        }
    }

    pub fn regression(seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::Regression { dim: 256, noise: 0.1, train: 4096, test: 1024, seed },
            model: ModelSpec::Linear,
            optimizer: Sgd { lr: 0.01, momentum: 0.9 },
            global_batch: 64,
            steps: 500,
            eval_every: 100,
            init_seed: seed,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["logistic", "mlp", "embedding_bag", "regression"];

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "logistic" => Some(Self::logistic(seed)),
            "mlp" => Some(Self::mlp(seed)),
            "embedding_bag" => Some(Self::embedding_bag(seed)),
            "regression" => Some(Self::regression(seed)),
            _ => None,
        }
    }

    pub fn validate(&self, nodes: usize) -> Result<(), EngineError> {
        if nodes == 0 || self.global_batch == 0 || self.global_batch % nodes != 0 {
            return Err(EngineError::Config(format!("global batch {} must be a positive multiple of {nodes} nodes", self.global_batch)));
        }
        if self.eval_every == 0 {
            return Err(EngineError::Config("eval_every must be > 0".into()));
        }
        Ok(())
    }

    /// Sample indices of the global batch at `step` (with replacement).
    pub fn batch_indices(&self, step: usize, train_len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::codec::rng::derive_seed(self.init_seed, &[0xba7c, step as u64]));
        (0..self.global_batch).map(|_| rng.gen_range(0..train_len)).collect()
    }
}

/// A minibatch, borrowed from a split.
pub struct Batch<'a> {
    pub inputs: Vec<&'a Input>,
    pub labels: Vec<f32>,
}

impl<'a> Batch<'a> {
    pub fn from_indices(split: &'a Split, idx: &[usize]) -> Self {
        Self { inputs: idx.iter().map(|&i| &split.inputs[i]).collect(), labels: idx.iter().map(|&i| split.labels[i]).collect() }
    }

    pub fn whole(split: &'a Split) -> Self {
        Self { inputs: split.inputs.iter().collect(), labels: split.labels.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerSpec>,
    classes: usize,
    dim: usize,
    vocab: usize,
}

fn dense(x: &Input) -> &[f32] {
    match x {
        Input::Dense(v) => v,
        Input::Tokens(_) => panic!("dense model fed token input"),
    }
}

fn tokens(x: &Input) -> &[u32] {
    match x {
        Input::Tokens(t) => t,
        Input::Dense(_) => panic!("embedding model fed dense input"),
    }
}

/// out[o] = b[o] + sum_i w[o * n_in + i] * x[i]
fn affine(w: &[f32], b: &[f32], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo as f64 + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(&wi, &xi)| wi as f64 * xi).sum::<f64>())
        .collect()
}

/// Accumulates d(loss)/d(w, b) for an affine layer and returns d(loss)/dx.
fn affine_backward(w: &[f32], x: &[f64], dout: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[o] += d;
        let row = o * n_in..(o + 1) * n_in;
        for ((g, &xi), (dxi, &wi)) in gw[row.clone()].iter_mut().zip(x).zip(dx.iter_mut().zip(&w[row])) {
            *g += d * xi;
            *dxi += d * wi as f64;
        }
    }
    dx
}

/// Cross-entropy of logits against `label`; returns (loss, dlogits).
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - m);
    let d = exps.iter().enumerate().map(|(i, &e)| e / sum - if i == label { 1.0 } else { 0.0 }).collect();
    (loss, d)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

impl Model {
    pub fn new(spec: ModelSpec, data: &Dataset) -> Self {
        let out = data.classes.max(1);
        let layers = match spec {
            ModelSpec::Linear => vec![
                LayerSpec::new("fc.weight", out * data.dim, LayerKind::Weight),
                LayerSpec::new("fc.bias", out, LayerKind::Bias),
            ],
            ModelSpec::Mlp { hidden } => vec![
                LayerSpec::new("fc1.weight", hidden * data.dim, LayerKind::Weight),
                LayerSpec::new("fc1.bias", hidden, LayerKind::Bias),
                LayerSpec::new("fc2.weight", out * hidden, LayerKind::Weight),
                LayerSpec::new("fc2.bias", out, LayerKind::Bias),
            ],
            ModelSpec::EmbeddingBag { dim, hidden, depth } => {
                let mut layers = vec![LayerSpec::new("embed.weight", data.vocab * dim, LayerKind::Embedding)];
                for i in 0..=depth {
                    let n_in = if i == 0 { dim } else { hidden };
                    let n_out = if i == depth { out } else { hidden };
                    layers.push(LayerSpec::new(format!("fc{}.weight", i + 1), n_out * n_in, LayerKind::Weight));
                    layers.push(LayerSpec::new(format!("fc{}.bias", i + 1), n_out, LayerKind::Bias));
                }
                layers
            }
        };
        let dim = match spec {
            ModelSpec::EmbeddingBag { dim, .. } => dim,
            _ => data.dim,
        };
        Self { spec, layers, classes: data.classes, dim, vocab: data.vocab }
    }

    pub fn is_classifier(&self) -> bool {
        self.classes > 0
    }

    pub fn init(&self, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Bias => vec![0.0; l.element_count],
                LayerKind::Embedding => (0..l.element_count).map(|_| normal(&mut rng) as f32).collect(),
                _ => {
                    let fan_in = match self.spec {
                        ModelSpec::Mlp { hidden } | ModelSpec::EmbeddingBag { hidden, .. } if l.name != "fc1.weight" => hidden,
                        _ => self.dim,
                    };
                    let scale = (2.0 / fan_in.max(1) as f64).sqrt();
                    let zero_init = self.spec == ModelSpec::Linear;
                    (0..l.element_count).map(|_| if zero_init { 0.0 } else { (normal(&mut rng) * scale) as f32 }).collect()
                }
            })
            .collect()
    }

    /// Forward pass of one example: (output, cached activations).
    fn forward(&self, p: &[Vec<f32>], x: &Input) -> (Vec<f64>, Vec<Vec<f64>>) {
        match self.spec {
            ModelSpec::Linear => {
                let xv: Vec<f64> = dense(x).iter().map(|&v| v as f64).collect();
                (affine(&p[0], &p[1], &xv), vec![xv])
            }
            ModelSpec::Mlp { .. } => {
                let xv: Vec<f64> = dense(x).iter().map(|&v| v as f64).collect();
                let h: Vec<f64> = affine(&p[0], &p[1], &xv).into_iter().map(|z| z.max(0.0)).collect();
                (affine(&p[2], &p[3], &h), vec![xv, h])
            }
            ModelSpec::EmbeddingBag { dim, .. } => {
                let toks = tokens(x);
                let mut e = vec![0.0; dim];
                for &t in toks {
                    let row = &p[0][t as usize * dim..(t as usize + 1) * dim];
                    e.iter_mut().zip(row).for_each(|(a, &w)| *a += w as f64);
                }
                let inv = 1.0 / toks.len().max(1) as f64;
                e.iter_mut().for_each(|a| *a *= inv);
                let mut acts = vec![e];
                let last = p.len() / 2 - 1;
                for l in 0..last {
                    let h = affine(&p[1 + 2 * l], &p[2 + 2 * l], &acts[l]).into_iter().map(|z| z.max(0.0)).collect();
                    acts.push(h);
                }
                (affine(&p[1 + 2 * last], &p[2 + 2 * last], &acts[last]), acts)
            }
        }
    }

    fn loss_of(&self, out: &[f64], label: f32) -> (f64, Vec<f64>) {
        if self.is_classifier() {
            softmax_xent(out, label as usize)
        } else {
            let r = out[0] - label as f64;
            (0.5 * r * r, vec![r])
        }
    }

    /// Mean loss and mean gradient over the batch.
    pub fn loss_and_grad(&self, p: &[Vec<f32>], batch: &Batch) -> (f64, Vec<Vec<f32>>) {
        let mut g: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.element_count]).collect();
        let mut total = 0.0;
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            let (out, acts) = self.forward(p, x);
            let (loss, dout) = self.loss_of(&out, y);
            total += loss;
            match self.spec {
                ModelSpec::Linear => {
                    let (gw, rest) = g.split_at_mut(1);
                    affine_backward(&p[0], &acts[0], &dout, &mut gw[0], &mut rest[0]);
                }
                ModelSpec::Mlp { .. } => {
                    let (g01, g23) = g.split_at_mut(2);
                    let (g2, g3) = g23.split_at_mut(1);
                    let dh = affine_backward(&p[2], &acts[1], &dout, &mut g2[0], &mut g3[0]);
                    let dz: Vec<f64> = dh.iter().zip(&acts[1]).map(|(&d, &h)| if h > 0.0 { d } else { 0.0 }).collect();
                    let (g0, g1) = g01.split_at_mut(1);
                    affine_backward(&p[0], &acts[0], &dz, &mut g0[0], &mut g1[0]);
                }
                ModelSpec::EmbeddingBag { dim, .. } => {
                    let last = p.len() / 2 - 1;
                    let mut d = dout;
                    for l in (0..=last).rev() {
                        let (gw, gb) = g[1 + 2 * l..3 + 2 * l].split_at_mut(1);
                        d = affine_backward(&p[1 + 2 * l], &acts[l], &d, &mut gw[0], &mut gb[0]);
                        if l > 0 {
                            d.iter_mut().zip(&acts[l]).for_each(|(di, &h)| if h <= 0.0 { *di = 0.0 });
                        }
                    }
                    let (de, g0) = (d, &mut g[..1]);
                    let toks = tokens(x);
                    let inv = 1.0 / toks.len().max(1) as f64;
                    for &t in toks {
                        let row = &mut g0[0][t as usize * dim..(t as usize + 1) * dim];
                        row.iter_mut().zip(&de).for_each(|(a, &d)| *a += d * inv);
                    }
                }
            }
        }
        let n = batch.inputs.len().max(1) as f64;
        let grads = g.into_iter().map(|v| v.into_iter().map(|x| (x / n) as f32).collect()).collect();
        (total / n, grads)
    }

    /// (mean loss, metric): accuracy for classifiers, R^2 for regression.
    pub fn evaluate(&self, p: &[Vec<f32>], split: &Split) -> (f64, f64) {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut sq_err = 0.0;
        for (x, &y) in split.inputs.iter().zip(&split.labels) {
            let (out, _) = self.forward(p, x);
            loss += self.loss_of(&out, y).0;
            if self.is_classifier() {
                correct += (argmax(&out) == y as usize) as usize;
            } else {
                sq_err += (out[0] - y as f64).powi(2);
            }
        }
        let n = split.len().max(1) as f64;
        let metric = if self.is_classifier() {
            correct as f64 / n
        } else {
            let mean = split.labels.iter().map(|&y| y as f64).sum::<f64>() / n;
            let var = split.labels.iter().map(|&y| (y as f64 - mean).powi(2)).sum::<f64>();
            if var > 0.0 {
                1.0 - sq_err / var
            } else {
                0.0
            }
        };
        (loss / n, metric)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_check(task: &TrainTask) {
        let data = task.dataset.generate();
        let model = Model::new(task.model, &data);
        let mut p = model.init(3);
        // nonzero params so the linear model's gradient is not trivially symmetric
        for l in p.iter_mut() {
            for (i, x) in l.iter_mut().enumerate() {
                *x += ((i * 7919) % 13) as f32 * 0.01 - 0.06;
            }
        }
        let batch = Batch::from_indices(&data.train, &[0, 1, 2, 3]);
        let (_, g) = model.loss_and_grad(&p, &batch);
        for (li, layer) in model.layers.iter().enumerate() {
            for &i in &[0, layer.element_count / 2, layer.element_count - 1] {
                let h = 1e-2f32;
                let mut hi = p.clone();
                hi[li][i] += h;
                let mut lo = p.clone();
                lo[li][i] -= h;
                let num = (model.loss_and_grad(&hi, &batch).0 - model.loss_and_grad(&lo, &batch).0) / (2.0 * h as f64);
                let ana = g[li][i] as f64;
                assert!((num - ana).abs() <= 1e-3 + 1e-2 * ana.abs(), "{} [{i}]: numeric {num} analytic {ana}", layer.name);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let small = |model| TrainTask {
            dataset: DatasetSpec::Blobs { classes: 3, dim: 6, clusters_per_class: 2, separation: 2.0, train: 16, test: 4, seed: 1 },
            model,
            ..TrainTask::mlp(0)
        };
        numeric_check(&small(ModelSpec::Linear));
        numeric_check(&small(ModelSpec::Mlp { hidden: 5 }));
        numeric_check(&TrainTask {
            dataset: DatasetSpec::Tokens { vocab: 20, length: 5, classes: 3, signal: 0.5, train: 16, test: 4, seed: 2 },
            model: ModelSpec::EmbeddingBag { dim: 4, hidden: 6, depth: 2 },
            ..TrainTask::mlp(0)
        });
        numeric_check(&TrainTask { dataset: DatasetSpec::Regression { dim: 5, noise: 0.1, train: 16, test: 4, seed: 3 }, ..TrainTask::regression(0) });
    }

    #[test]
    fn datasets_are_seeded() {
        let a = TrainTask::mlp(4).dataset.generate();
        let b = TrainTask::mlp(4).dataset.generate();
        let c = TrainTask::mlp(5).dataset.generate();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.train.len(), 4096);
    }

    #[test]
    fn batch_must_shard_evenly() {
        assert!(TrainTask::logistic(0).validate(8).is_ok());
        assert!(TrainTask::logistic(0).validate(7).is_err());
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = vec![vec![1.0f32]];
        let mut v = vec![vec![0.0f32]];
        let sgd = Sgd { lr: 0.1, momentum: 0.5 };
        sgd.apply(&mut p, &mut v, &[&[1.0]]);
        sgd.apply(&mut p, &mut v, &[&[1.0]]);
        assert!((p[0][0] - (1.0 - 0.1 - 0.15)).abs() < 1e-6);
    }
}
