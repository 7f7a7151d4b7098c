//! Seeded Lloyd k-means with k-means++ initialization.
//!
//! Arithmetic runs in `f64`. Returned centroids are rounded to `f32`, and the
//! reported assignments and objective are recomputed against those rounded
//! centroids so they agree exactly with what a reconstruction will produce.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat list of equal-length vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    block_len: usize,
    values: Vec<f32>,
}

impl BlockSet {
    pub fn new(block_len: usize, values: Vec<f32>) -> Result<Self> {
        if block_len == 0 || !values.len().is_multiple_of(block_len) {
            return Err(Error::InvalidArgument(format!(
                "{} values cannot be split into blocks of {block_len}",
                values.len()
            )));
        }
        Ok(Self { block_len, values })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.values[i * self.block_len..(i + 1) * self.block_len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.block_len)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of distinct blocks; `-0.0` and `0.0` compare equal.
    pub fn distinct_count(&self) -> usize {
        self.iter()
            .map(|b| {
                b.iter()
                    .map(|&v| if v == 0.0 { 0u32 } else { v.to_bits() })
                    .collect::<Vec<_>>()
            })
            .collect::<HashSet<_>>()
            .len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iters: usize,
    pub rel_objective_tol: f64,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 300,
            rel_objective_tol: 1e-7,
            restarts: 4,
        }
    }
}

impl KMeansOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "k-means needs max_iters >= 1 and restarts >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Flat `f32` centroids, `block_len` values each. Every centroid has at least one member.
    pub centroids: Vec<f32>,
    pub block_len: usize,
    pub assignments: Vec<u32>,
    /// Sum of squared distances from each point to its assigned (rounded) centroid.
    pub objective: f64,
    pub requested_k: usize,
    /// `requested_k` clamped to the number of distinct points.
    pub effective_k: usize,
    /// Objective after each Lloyd assignment step of the winning restart.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn num_centroids(&self) -> usize {
        self.centroids.len() / self.block_len
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.block_len..(i + 1) * self.block_len]
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid with ties going to the smaller index.
#[inline]
pub(crate) fn nearest(point: &[f64], centroids: &[f64], m: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(m).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans(points: &BlockSet, k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    opts.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    let m = points.block_len();
    let n = points.len();
    let effective_k = k.min(points.distinct_count());
    let data: Vec<f64> = points.values().iter().map(|&v| v as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..opts.restarts {
        let (centroids, history) = lloyd(&data, m, n, effective_k, opts, &mut rng);
        let run = finalize(&data, m, centroids, history, k, effective_k);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn seed_plus_plus(data: &[f64], m: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let point = |i: usize| &data[i * m..(i + 1) * m];
    let mut centroids = Vec::with_capacity(k * m);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                acc += d;
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("total > 0 implies a positive weight");
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), point(pick)));
        }
    }
    centroids
}

fn lloyd(
    data: &[f64],
    m: usize,
    n: usize,
    k: usize,
    opts: &KMeansOptions,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut centroids = seed_plus_plus(data, m, n, k, rng);
    let k = centroids.len() / m;
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;

    for _ in 0..opts.max_iters {
        for i in 0..n {
            let (c, d) = nearest(&data[i * m..(i + 1) * m], &centroids, m);
            assign[i] = c;
            dist[i] = d;
        }
        repair_empty(data, m, k, &mut centroids, &mut assign, &mut dist);

        let objective: f64 = dist.iter().sum();
        debug_assert!(
            objective <= prev * (1.0 + 1e-12),
            "k-means objective increased: {prev} -> {objective}"
        );
        history.push(objective);

        let mut sums = vec![0.0f64; k * m];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, v) in sums[c * m..(c + 1) * m].iter_mut().zip(&data[i * m..(i + 1) * m]) {
                *s += v;
            }
        }
        for c in (0..k).filter(|&c| counts[c] > 0) {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids[c * m..(c + 1) * m].iter_mut().zip(&sums[c * m..(c + 1) * m]) {
                *dst = s * inv;
            }
        }

        if objective == 0.0 || (prev.is_finite() && prev - objective <= opts.rel_objective_tol * prev) {
            break;
        }
        prev = objective;
    }
    (centroids, history)
}

/// Moves each empty centroid onto the worst-fitting point of a cluster that can spare it.
fn repair_empty(
    data: &[f64],
    m: usize,
    k: usize,
    centroids: &mut [f64],
    assign: &mut [usize],
    dist: &mut [f64],
) {
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    for e in 0..k {
        if counts[e] != 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for i in 0..assign.len() {
            if counts[assign[i]] > 1 && donor.is_none_or(|d| dist[i] > dist[d]) {
                donor = Some(i);
            }
        }
        // k <= distinct points guarantees a multi-member cluster exists
        let Some(i) = donor else { break };
        counts[assign[i]] -= 1;
        counts[e] = 1;
        assign[i] = e;
        dist[i] = 0.0;
        centroids[e * m..(e + 1) * m].copy_from_slice(&data[i * m..(i + 1) * m]);
    }
}

fn finalize(
    data: &[f64],
    m: usize,
    centroids: Vec<f64>,
    history: Vec<f64>,
    requested_k: usize,
    effective_k: usize,
) -> KMeansResult {
    let rounded: Vec<f64> = centroids.iter().map(|&v| v as f32 as f64).collect();
    let n = data.len() / m;
    let k = rounded.len() / m;
    let mut raw_assign = Vec::with_capacity(n);
    let mut used = vec![false; k];
    let mut objective = 0.0;
    for i in 0..n {
        let (c, d) = nearest(&data[i * m..(i + 1) * m], &rounded, m);
        raw_assign.push(c);
        used[c] = true;
        objective += d;
    }

    let mut remap = vec![u32::MAX; k];
    let mut kept = Vec::new();
    for c in (0..k).filter(|&c| used[c]) {
        remap[c] = (kept.len() / m) as u32;
        kept.extend(rounded[c * m..(c + 1) * m].iter().map(|&v| v as f32));
    }
    KMeansResult {
        centroids: kept,
        block_len: m,
        assignments: raw_assign.into_iter().map(|c| remap[c]).collect(),
        objective,
        requested_k,
        effective_k,
        history,
    }
}
