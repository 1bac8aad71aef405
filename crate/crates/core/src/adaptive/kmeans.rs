//! Lloyd's k-means with k-means++ seeding and a fixed number of restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_ITERATIONS: usize = 100;
pub const SHIFT_TOLERANCE: f64 = 1e-6;
/// Independent seedings; the run with the lowest inertia wins.
pub const RESTARTS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering<const D: usize> {
    /// Non-empty clusters only.
    pub centroids: Vec<[f64; D]>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest<const D: usize>(p: &[f64; D], centroids: &[[f64; D]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Picks up to `k` distinct seeds by D² sampling. Stops early when every
/// remaining point coincides with a seed.
fn seed_centroids<const D: usize>(points: &[[f64; D]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; D]> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = i;
                break;
            }
        }
        centroids.push(points[pick]);
    }
    centroids
}

pub fn kmeans<const D: usize>(points: &[[f64; D]], k: usize, seed: u64) -> Clustering<D> {
    if points.is_empty() || k == 0 {
        return Clustering { centroids: Vec::new(), assignment: vec![0; points.len()], iterations: 0, inertia: 0.0 };
    }
    let mut best = lloyd(points, k, crate::codec::rng::derive_seed(seed, &[0]));
    for r in 1..RESTARTS {
        let next = lloyd(points, k, crate::codec::rng::derive_seed(seed, &[r]));
        if next.inertia < best.inertia {
            best = next;
        }
    }
    best
}

fn lloyd<const D: usize>(points: &[[f64; D]], k: usize, seed: u64) -> Clustering<D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k.min(points.len()), &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![[0.0; D]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for (c, (s, &n)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if n == 0 {
                continue;
            }
            let next = s.map(|x| x / n as f64);
            shift = shift.max(dist2(c, &next).sqrt());
            scale = scale.max(next.iter().map(|x| x * x).sum::<f64>().sqrt());
            *c = next;
        }
        assignment = points.iter().map(|p| nearest(p, &centroids)).collect();
        if shift <= SHIFT_TOLERANCE * scale {
            break;
        }
    }

    let mut used = vec![false; centroids.len()];
    assignment.iter().for_each(|&a| used[a] = true);
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for (i, c) in centroids.iter().enumerate() {
        if used[i] {
            remap[i] = kept.len();
            kept.push(*c);
        }
    }
    let assignment: Vec<usize> = assignment.into_iter().map(|a| remap[a]).collect();
    let inertia = points.iter().zip(&assignment).map(|(p, &a)| dist2(p, &kept[a])).sum();
    Clustering { centroids: kept, assignment, iterations, inertia }
}
