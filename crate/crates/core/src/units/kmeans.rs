//! Lloyd's k-means with k-means++ seeding.
//!
//! Centroid math runs in f64 and is rounded to f32 once at the end, so the
//! recorded inertia trace is monotone and the stored codebook matches its
//! on-disk representation exactly.

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop when no centroid moves further than this (L2).
    pub tol: f64,
    /// Fraction of the input points used for fitting, sampled without
    /// replacement; 1.0 fits on everything.
    pub subsample: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            seed: 0,
            max_iters: 300,
            tol: 1e-6,
            subsample: 0.25,
        }
    }
}

/// The unit vocabulary: k centroids plus fit metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// [k, dim], row-major.
    centroids: Tensor<f32>,
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

impl Codebook {
    pub fn from_centroids(centroids: Tensor<f32>) -> Result<Self> {
        if !centroids.all_finite() {
            return Err(Error::InvalidArgument(
                "codebook centroids must be finite".into(),
            ));
        }
        let (k, _) = centroids.dims2();
        if k == 0 {
            return Err(Error::InvalidArgument("codebook needs k >= 1".into()));
        }
        Ok(Codebook {
            centroids,
            seed: 0,
            iterations: 0,
            inertia: 0.0,
            inertia_trace: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.dims2().0
    }

    pub fn dim(&self) -> usize {
        self.centroids.dims2().1
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        self.centroids.row(i)
    }

    pub fn centroids(&self) -> &Tensor<f32> {
        &self.centroids
    }

    /// Index of the nearest centroid (squared L2, f64 accumulation in
    /// coordinate order); ties resolve to the lowest index.
    pub fn nearest(&self, point: &[f32]) -> usize {
        debug_assert_eq!(point.len(), self.dim());
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k() {
            let row = self.centroids.row(c);
            let mut d = 0.0f64;
            for (&p, &q) in point.iter().zip(row) {
                let diff = p as f64 - q as f64;
                d += diff * diff;
                if d > best_d {
                    break;
                }
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    let mut d = 0.0f64;
    for (&p, &q) in a.iter().zip(b) {
        let diff = p as f64 - q;
        d += diff * diff;
    }
    d
}

fn count_distinct(points: &Tensor<f32>, rows: &[usize]) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(rows.len());
    for &r in rows {
        seen.insert(points.row(r).iter().map(|f| f.to_bits()).collect());
    }
    seen.len()
}

/// Fit k centroids to the rows of `points` ([n, dim]).
pub fn kmeans_fit(points: &Tensor<f32>, k: usize, config: &KmeansConfig) -> Result<Codebook> {
    let (n, dim) = points.dims2();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !(config.subsample > 0.0 && config.subsample <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample must be in (0, 1], got {}",
            config.subsample
        )));
    }
    if n < k {
        return Err(Error::TooFewDistinctPoints { k, distinct: n });
    }

    // Fit set: seeded sample without replacement, kept in ascending row order
    // so accumulation order is independent of the draw order.
    let mut fit_rows: Vec<usize> = if config.subsample < 1.0 {
        let m = ((n as f64 * config.subsample).ceil() as usize).max(k).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "kmeans.subsample"));
        let mut rows = rand::seq::index::sample(&mut rng, n, m).into_vec();
        rows.sort_unstable();
        rows
    } else {
        (0..n).collect()
    };

    let distinct = count_distinct(points, &fit_rows);
    if distinct < k {
        // A thin subsample can under-represent diversity the full set has.
        if config.subsample < 1.0 && count_distinct(points, &(0..n).collect::<Vec<_>>()) >= k {
            fit_rows = (0..n).collect();
        } else {
            return Err(Error::TooFewDistinctPoints { k, distinct });
        }
    }

    let m = fit_rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "kmeans.init"));

    // k-means++ seeding over the fit set.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = fit_rows[rng.gen_range(0..m)];
    centroids.push(points.row(first).iter().map(|&v| v as f64).collect());
    let mut min_d: Vec<f64> = fit_rows
        .iter()
        .map(|&r| sq_dist(points.row(r), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = min_d.iter().sum();
        // distinct >= k guarantees some point is off every chosen centroid.
        debug_assert!(total > 0.0);
        let mut target = rng.gen::<f64>() * total;
        let mut picked = None;
        for (i, &d) in min_d.iter().enumerate() {
            if d > 0.0 {
                target -= d;
                if target < 0.0 {
                    picked = Some(i);
                    break;
                }
            }
        }
        // Rounding can leave target nonnegative after the walk; fall back to
        // the last point with positive distance.
        let chosen =
            picked.unwrap_or_else(|| (0..m).rev().find(|&i| min_d[i] > 0.0).unwrap());
        let c: Vec<f64> = points.row(fit_rows[chosen]).iter().map(|&v| v as f64).collect();
        for (i, &r) in fit_rows.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(points.row(r), &c));
        }
        centroids.push(c);
    }

    // Lloyd iterations.
    let mut assignment = vec![0usize; m];
    let mut dist_to_own = vec![0.0f64; m];
    let mut inertia_trace: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    let assign = |centroids: &[Vec<f64>], assignment: &mut [usize], dist: &mut [f64]| -> f64 {
        let mut inertia = 0.0f64;
        for (i, &r) in fit_rows.iter().enumerate() {
            let p = points.row(r);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            dist[i] = best_d;
            inertia += best_d;
        }
        inertia
    };

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let inertia = assign(&centroids, &mut assignment, &mut dist_to_own);
        inertia_trace.push(inertia);

        // Mean update in f64, accumulated in fit-set order.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &r) in fit_rows.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (acc, &v) in sums[c].iter_mut().zip(points.row(r)) {
                *acc += v as f64;
            }
        }
        let mut new_centroids = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in new_centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }

        // Empty clusters grab the points farthest from their own centroid,
        // one point per empty cluster, farthest first.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                dist_to_own[b]
                    .partial_cmp(&dist_to_own[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for (e, &c) in empties.iter().enumerate() {
                let donor = fit_rows[order[e]];
                for (dst, &v) in new_centroids[c].iter_mut().zip(points.row(donor)) {
                    *dst = v as f64;
                }
            }
        }

        let movement = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max);
        centroids = new_centroids;
        if movement < config.tol {
            break;
        }
    }

    // Inertia of the final centroids.
    let final_inertia = assign(&centroids, &mut assignment, &mut dist_to_own);
    inertia_trace.push(final_inertia);

    let mut data = Vec::with_capacity(k * dim);
    for c in &centroids {
        data.extend(c.iter().map(|&v| v as f32));
    }
    Ok(Codebook {
        centroids: Tensor::new(vec![k, dim], data)?,
        seed: config.seed,
        iterations,
        inertia: final_inertia,
        inertia_trace,
    })
}
