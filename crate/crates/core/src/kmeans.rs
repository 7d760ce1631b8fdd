//! Lloyd iterations with k-means++ seeding, in Euclidean or spherical geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    /// Squared Euclidean distance, arithmetic means.
    Euclidean,
    /// Cosine similarity on unit rows; means are renormalized to the sphere.
    Spherical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances (Euclidean) or of `1 - cos` (spherical).
    pub inertia: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct KMeansOptions {
    pub geometry: Geometry,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

fn distance(geometry: Geometry, a: &[f64], b: &[f64]) -> f64 {
    match geometry {
        Geometry::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Geometry::Spherical => 1.0 - dot(a, b),
    }
}

/// Seeding weight for a point at `d` from its closest chosen centroid.
fn seeding_weight(geometry: Geometry, d: f64) -> f64 {
    match geometry {
        Geometry::Euclidean => d.max(0.0),
        // Squared chord length between unit vectors.
        Geometry::Spherical => (2.0 * d).max(0.0),
    }
}

fn seed_centroids(points: &Tensor, k: usize, geometry: Geometry, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut closest: Vec<f64> = (0..n)
        .map(|i| distance(geometry, points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let weights: Vec<f64> = closest.iter().map(|&d| seeding_weight(geometry, d)).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        } else {
            // Every remaining point coincides with a centroid.
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min(distance(geometry, points.row(i), points.row(next)));
        }
    }
    chosen
}

fn assign(points: &Tensor, centroids: &Tensor, geometry: Geometry) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    for row in points.iter_rows() {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centroids.iter_rows().enumerate() {
            let d = distance(geometry, row, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

fn single_run(points: &Tensor, k: usize, opts: &KMeansOptions, rng: &mut ChaCha20Rng) -> KMeansResult {
    let seeds = seed_centroids(points, k, opts.geometry, rng);
    let mut centroids = points.select_rows(&seeds).expect("seed rows");
    let (mut labels, mut dists) = assign(points, &centroids, opts.geometry);
    for _ in 0..opts.max_iter {
        let cols = points.cols();
        let mut sums = vec![0.0; k * cols];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * cols..(l + 1) * cols].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = Vec::new();
        for j in 0..k {
            let target = centroids.row_mut(j);
            if counts[j] == 0 {
                // Re-seed an empty cluster with the worst-served point.
                let far = (0..dists.len())
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("a free point");
                taken.push(far);
                target.copy_from_slice(points.row(far));
                continue;
            }
            let mean = &sums[j * cols..(j + 1) * cols];
            match opts.geometry {
                Geometry::Euclidean => {
                    for (t, s) in target.iter_mut().zip(mean) {
                        *t = s / counts[j] as f64;
                    }
                }
                Geometry::Spherical => {
                    let norm = dot(mean, mean).sqrt();
                    if norm > 1e-12 {
                        for (t, s) in target.iter_mut().zip(mean) {
                            *t = s / norm;
                        }
                    }
                }
            }
        }
        let (new_labels, new_dists) = assign(points, &centroids, opts.geometry);
        dists = new_dists;
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    let inertia = dists.iter().sum();
    KMeansResult {
        centroids,
        assignments: labels,
        inertia,
    }
}

/// Best of `n_init` seeded runs by inertia. Requires `1 <= k <= points.rows()`.
pub fn kmeans(points: &Tensor, k: usize, opts: &KMeansOptions) -> KMeansResult {
    assert!(k >= 1 && k <= points.rows(), "kmeans needs 1 <= k <= n");
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..opts.n_init.max(1) {
        let run = single_run(points, k, opts, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("at least one run")
}
