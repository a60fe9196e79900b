//! Lloyd's k-means with k-means++ seeding, used to train codebooks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{cast, Scalar};

use super::BowError;

/// Vector-quantization codebook: `k` centers of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F: Scalar> {
    centers: Vec<Vec<F>>,
}

impl<F: Scalar> Codebook<F> {
    pub fn from_centers(centers: Vec<Vec<F>>) -> Result<Self, BowError> {
        if centers.len() < 2 {
            return Err(BowError::InvalidCodebookSize { k: centers.len() });
        }
        let dim = centers[0].len();
        for c in &centers {
            if c.len() != dim {
                return Err(BowError::DimensionMismatch { expected: dim, got: c.len() });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(BowError::NonFinite);
            }
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<F>] {
        &self.centers
    }

    pub fn center(&self, i: usize) -> &[F] {
        &self.centers[i]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KmeansParams<F: Scalar> {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop when the relative objective improvement drops below this.
    pub tol: F,
}

impl<F: Scalar> Default for KmeansParams<F> {
    fn default() -> Self {
        Self { k: 256, seed: 0, max_iters: 50, tol: cast(1e-4) }
    }
}

/// Training result; the objective trace is the sum of squared distances after
/// each update step and never increases.
#[derive(Debug, Clone)]
pub struct KmeansOutcome<F: Scalar> {
    pub codebook: Codebook<F>,
    pub objective_trace: Vec<F>,
}

fn dist2<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Trains a codebook with Lloyd's algorithm.
///
/// Seeding is k-means++ driven by a seeded generator. An emptied cluster is
/// re-seeded from the point currently farthest from its assigned center.
pub fn kmeans_train<F: Scalar>(
    samples: &[Vec<F>],
    params: &KmeansParams<F>,
) -> Result<KmeansOutcome<F>, BowError> {
    if params.k < 2 {
        return Err(BowError::InvalidCodebookSize { k: params.k });
    }
    if samples.len() < params.k {
        return Err(BowError::TooFewSamples { needed: params.k, got: samples.len() });
    }
    let dim = samples[0].len();
    for s in samples {
        if s.len() != dim {
            return Err(BowError::DimensionMismatch { expected: dim, got: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(BowError::NonFinite);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers = seed_plus_plus(samples, params.k, &mut rng);

    let n = samples.len();
    let mut assign = vec![0usize; n];
    let mut best_d2 = vec![F::zero(); n];
    let mut trace = Vec::new();
    let mut prev_obj: Option<F> = None;

    for _ in 0..params.max_iters {
        // Assignment step; strict `<` keeps the lowest index on ties.
        for (i, s) in samples.iter().enumerate() {
            let mut bi = 0usize;
            let mut bd = dist2(s, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = dist2(s, center);
                if d < bd {
                    bd = d;
                    bi = c;
                }
            }
            assign[i] = bi;
            best_d2[i] = bd;
        }

        // Re-seed emptied clusters from the farthest point; moving the center
        // onto a point can only lower the objective.
        let mut counts = vec![0usize; params.k];
        for &a in &assign {
            counts[a] += 1;
        }
        let mut stolen = vec![false; n];
        for c in 0..params.k {
            if counts[c] > 0 {
                continue;
            }
            // Only steal from clusters that keep at least one member; an
            // empty cluster guarantees some cluster has two or more.
            let far = (0..n)
                .filter(|&i| !stolen[i] && counts[assign[i]] > 1)
                .max_by(|&a, &b| best_d2[a].partial_cmp(&best_d2[b]).expect("finite"))
                .expect("more samples than clusters");
            stolen[far] = true;
            counts[assign[far]] -= 1;
            counts[c] += 1;
            assign[far] = c;
            centers[c] = samples[far].clone();
            best_d2[far] = F::zero();
        }

        // Update step: means per cluster.
        for center in centers.iter_mut() {
            center.iter_mut().for_each(|v| *v = F::zero());
        }
        for (i, s) in samples.iter().enumerate() {
            for (acc, &v) in centers[assign[i]].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let inv = F::one() / cast::<F>(counts[c] as f64);
            center.iter_mut().for_each(|v| *v *= inv);
        }

        let obj: F = samples
            .iter()
            .enumerate()
            .map(|(i, s)| dist2(s, &centers[assign[i]]))
            .sum();
        trace.push(obj);

        if let Some(prev) = prev_obj {
            let denom = prev.max(F::min_positive_value());
            if (prev - obj) / denom < params.tol {
                break;
            }
        }
        prev_obj = Some(obj);
    }

    Ok(KmeansOutcome { codebook: Codebook { centers }, objective_trace: trace })
}

/// k-means++: each center drawn with probability proportional to the squared
/// distance from the nearest already-chosen center. A zero-mass tail (all
/// remaining points coincide with chosen centers) falls back to the first
/// unchosen index.
fn seed_plus_plus<F: Scalar>(samples: &[Vec<F>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<F>> {
    let n = samples.len();
    let mut chosen_idx = Vec::with_capacity(k);
    let mut centers: Vec<Vec<F>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen_idx.push(first);
    centers.push(samples[first].clone());

    let mut d2: Vec<f64> = samples
        .iter()
        .map(|s| dist2(s, &centers[0]).to_f64().expect("finite distance"))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            (0..n).find(|i| !chosen_idx.contains(i)).expect("k <= n")
        };
        chosen_idx.push(next);
        centers.push(samples[next].clone());
        for (i, s) in samples.iter().enumerate() {
            let d = dist2(s, centers.last().unwrap()).to_f64().expect("finite");
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    #[test]
    fn distinct_points_with_k_equal_n_reach_zero_objective() {
        let samples: Vec<Vec<f64>> =
            (0..5).map(|i| vec![i as f64 * 3.0, (i * i) as f64]).collect();
        let params = KmeansParams { k: 5, seed: 1, ..KmeansParams::default() };
        let out = kmeans_train(&samples, &params).unwrap();
        assert_eq!(*out.objective_trace.last().unwrap(), 0.0);
        let mut got: Vec<Vec<f64>> = out.codebook.centers().to_vec();
        let mut want = samples.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_blobs_put_centers_inside_blob_boxes() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut samples = Vec::new();
        for _ in 0..40 {
            samples.push(vec![rng.random::<f64>(), rng.random::<f64>()]);
            samples.push(vec![rng.random::<f64>() + 10.0, rng.random::<f64>() + 10.0]);
        }
        let params = KmeansParams { k: 2, seed: 9, max_iters: 30, ..KmeansParams::default() };
        let out = kmeans_train(&samples, &params).unwrap();
        let mut in_low = 0;
        let mut in_high = 0;
        for c in out.codebook.centers() {
            if c[0] >= 0.0 && c[0] <= 1.0 && c[1] >= 0.0 && c[1] <= 1.0 {
                in_low += 1;
            }
            if c[0] >= 10.0 && c[0] <= 11.0 && c[1] >= 10.0 && c[1] <= 11.0 {
                in_high += 1;
            }
        }
        assert_eq!((in_low, in_high), (1, 1));
    }

    #[test]
    fn objective_trace_never_increases() {
        let mut rng = StdRng::seed_from_u64(17);
        let samples: Vec<Vec<f64>> =
            (0..120).map(|_| vec![rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0]).collect();
        for seed in 0..5 {
            let params = KmeansParams { k: 8, seed, max_iters: 40, tol: 0.0 };
            let out = kmeans_train(&samples, &params).unwrap();
            for w in out.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "objective increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let mut rng = StdRng::seed_from_u64(23);
        let samples: Vec<Vec<f64>> =
            (0..50).map(|_| vec![rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let params = KmeansParams { k: 6, seed: 77, ..KmeansParams::default() };
        let a = kmeans_train(&samples, &params).unwrap();
        let b = kmeans_train(&samples, &params).unwrap();
        assert_eq!(a.codebook, b.codebook);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn duplicate_heavy_data_exercises_fallback_paths() {
        // Two distinct values, k = 3: seeding must fall back past zero mass
        // and Lloyd must recover the emptied cluster.
        let mut samples = vec![vec![0.0, 0.0]; 6];
        samples.extend(vec![vec![5.0, 5.0]; 6]);
        let params = KmeansParams { k: 3, seed: 4, max_iters: 20, ..KmeansParams::default() };
        let out = kmeans_train(&samples, &params).unwrap();
        assert_eq!(out.codebook.k(), 3);
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert_eq!(*out.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let samples = vec![vec![0.0], vec![1.0]];
        let p = KmeansParams::<f64> { k: 3, ..KmeansParams::default() };
        assert!(matches!(kmeans_train(&samples, &p), Err(BowError::TooFewSamples { .. })));
        let p = KmeansParams::<f64> { k: 1, ..KmeansParams::default() };
        assert!(matches!(kmeans_train(&samples, &p), Err(BowError::InvalidCodebookSize { .. })));
        let p = KmeansParams::<f64> { k: 2, ..KmeansParams::default() };
        assert!(matches!(
            kmeans_train(&[vec![0.0], vec![f64::INFINITY]], &p),
            Err(BowError::NonFinite)
        ));
    }
}
