//! Binary SVM: sequential minimal optimization trainer for linear and RBF
//! kernels, plus scoring. The trainer is the simplified SMO variant with a
//! seeded random second-index choice, so results are deterministic per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{cast, Scalar};

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training labels must include both classes")]
    SingleClass,
    #[error("labels must be -1 or +1, got {0}")]
    BadLabel(i8),
    #[error("sample {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("non-finite value in sample {index}")]
    NonFinite { index: usize },
    #[error("all feature vectors are identical; nothing to separate")]
    DegenerateData,
    #[error("SMO did not converge within {sweeps} sweeps")]
    DidNotConverge { sweeps: usize },
}

/// Kernel selection. `gamma` must be finite and positive for `Rbf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec<F: Scalar> {
    Linear,
    Rbf { gamma: F },
}

impl<F: Scalar> KernelSpec<F> {
    pub fn eval(&self, a: &[F], b: &[F]) -> F {
        match *self {
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Rbf { gamma } => {
                let d2 = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<F>();
                (-gamma * d2).exp()
            }
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct SmoParams<F: Scalar> {
    /// Box constraint on the dual variables.
    pub c: F,
    /// KKT violation tolerance used by the stopping rule.
    pub tol: F,
    /// Consecutive full sweeps without an update before stopping.
    pub max_passes: usize,
    pub seed: u64,
    /// Hard cap on total sweeps; exceeding it is an error.
    pub sweep_cap: usize,
}

impl<F: Scalar> Default for SmoParams<F> {
    fn default() -> Self {
        Self { c: F::one(), tol: cast(1e-3), max_passes: 10, seed: 0, sweep_cap: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportVector<F: Scalar> {
    pub x: Vec<F>,
    /// Dual coefficient `alpha_i * y_i`.
    pub coeff: F,
    /// Index of the sample in the training set.
    pub index: usize,
}

/// Trained binary SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel<F: Scalar> {
    kernel: KernelSpec<F>,
    support_vectors: Vec<SupportVector<F>>,
    bias: F,
    /// Collapsed primal weights, linear kernel only.
    weights: Option<Vec<F>>,
    dim: usize,
    c: F,
}

impl<F: Scalar> SvmModel<F> {
    pub fn kernel(&self) -> &KernelSpec<F> {
        &self.kernel
    }

    pub fn support_vectors(&self) -> &[SupportVector<F>] {
        &self.support_vectors
    }

    pub fn bias(&self) -> F {
        self.bias
    }

    pub fn weights(&self) -> Option<&[F]> {
        self.weights.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn box_constraint(&self) -> F {
        self.c
    }

    /// Rebuilds a model from persisted parts.
    pub fn from_parts(
        kernel: KernelSpec<F>,
        support_vectors: Vec<SupportVector<F>>,
        bias: F,
        dim: usize,
        c: F,
    ) -> Self {
        let weights = match kernel {
            KernelSpec::Linear => Some(collapse_weights(&support_vectors, dim)),
            KernelSpec::Rbf { .. } => None,
        };
        Self { kernel, support_vectors, bias, weights, dim, c }
    }

    /// Builds a linear model directly from primal weights.
    pub fn from_linear_weights(weights: Vec<F>, bias: F) -> Self {
        let dim = weights.len();
        Self {
            kernel: KernelSpec::Linear,
            support_vectors: Vec::new(),
            bias,
            weights: Some(weights),
            dim,
            c: F::one(),
        }
    }

    /// Decision value. Linear models use the collapsed weights; kernel models
    /// sum over support vectors.
    pub fn score(&self, x: &[F]) -> Result<F, SvmError> {
        if x.len() != self.dim {
            return Err(SvmError::DimensionMismatch { index: 0, expected: self.dim, got: x.len() });
        }
        Ok(match &self.weights {
            Some(w) => dot(w, x) + self.bias,
            None => self.score_kernel_sum_unchecked(x),
        })
    }

    /// Decision value via the support-vector expansion, for any kernel.
    pub fn score_kernel_sum(&self, x: &[F]) -> Result<F, SvmError> {
        if x.len() != self.dim {
            return Err(SvmError::DimensionMismatch { index: 0, expected: self.dim, got: x.len() });
        }
        Ok(self.score_kernel_sum_unchecked(x))
    }

    fn score_kernel_sum_unchecked(&self, x: &[F]) -> F {
        self.support_vectors
            .iter()
            .map(|sv| sv.coeff * self.kernel.eval(&sv.x, x))
            .sum::<F>()
            + self.bias
    }
}

fn collapse_weights<F: Scalar>(svs: &[SupportVector<F>], dim: usize) -> Vec<F> {
    let mut w = vec![F::zero(); dim];
    for sv in svs {
        for (wi, &xi) in w.iter_mut().zip(&sv.x) {
            *wi += sv.coeff * xi;
        }
    }
    w
}

fn decision<F: Scalar>(gram: &[F], y: &[F], alpha: &[F], bias: F, m: usize, i: usize) -> F {
    let mut s = bias;
    for j in 0..m {
        if alpha[j] > F::zero() {
            s += alpha[j] * y[j] * gram[j * m + i];
        }
    }
    s
}

/// Jointly optimizes the dual pair `(i, j)` by an exact line search along
/// the equality-constraint direction. Bias plays no role: only error
/// differences enter the step. Returns false when the pair cannot make a
/// meaningful move (degenerate bounds, non-negative curvature, or a clipped
/// step below the update threshold).
#[allow(clippy::too_many_arguments)]
fn try_pair<F: Scalar>(
    gram: &[F],
    y: &[F],
    labels: &[i8],
    params: &SmoParams<F>,
    alpha: &mut [F],
    m: usize,
    i: usize,
    j: usize,
) -> bool {
    let k = |a: usize, b: usize| gram[a * m + b];
    let step_eps: F = cast::<F>(1e-8).max(F::epsilon() * cast(8.0));
    let e_i = decision(gram, y, alpha, F::zero(), m, i) - y[i];
    let e_j = decision(gram, y, alpha, F::zero(), m, j) - y[j];
    let (a_i_old, a_j_old) = (alpha[i], alpha[j]);
    let (low, high) = if labels[i] != labels[j] {
        (F::zero().max(a_j_old - a_i_old), params.c.min(params.c + a_j_old - a_i_old))
    } else {
        (F::zero().max(a_i_old + a_j_old - params.c), params.c.min(a_i_old + a_j_old))
    };
    if low >= high {
        return false;
    }
    let eta = cast::<F>(2.0) * k(i, j) - k(i, i) - k(j, j);
    if eta >= F::zero() {
        return false;
    }
    let mut a_j = a_j_old - y[j] * (e_i - e_j) / eta;
    a_j = a_j.max(low).min(high);
    if (a_j - a_j_old).abs() < step_eps {
        return false;
    }
    let a_i = a_i_old + y[i] * y[j] * (a_j_old - a_j);
    // Rounding can leave dust just off the bounds; snapped variables would
    // otherwise masquerade as free support vectors.
    let snap_eps = params.c * F::epsilon() * cast(64.0);
    let snap = |v: F| {
        if v < snap_eps {
            F::zero()
        } else if v > params.c - snap_eps {
            params.c
        } else {
            v
        }
    };
    alpha[i] = snap(a_i);
    alpha[j] = snap(a_j);
    true
}

/// Midpoint of the bias interval allowed by the KKT conditions at the
/// current dual variables (the minimax bias choice).
fn kkt_bias<F: Scalar>(gram: &[F], y: &[F], alpha: &[F], params: &SmoParams<F>, m: usize) -> F {
    let mut lo = F::neg_infinity();
    let mut hi = F::infinity();
    for i in 0..m {
        let g = decision(gram, y, alpha, F::zero(), m, i);
        let target = y[i] - g;
        let free = alpha[i] > F::zero() && alpha[i] < params.c;
        let positive = y[i] > F::zero();
        let wants_lower = free || (alpha[i] == F::zero() && positive) || (alpha[i] == params.c && !positive);
        let wants_upper = free || (alpha[i] == F::zero() && !positive) || (alpha[i] == params.c && positive);
        if wants_lower {
            lo = lo.max(target);
        }
        if wants_upper {
            hi = hi.min(target);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => (lo + hi) / cast(2.0),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => F::zero(),
    }
}

/// Trains a binary SVM with simplified SMO.
///
/// Labels must be -1 or +1 with both classes present. The kernel matrix is
/// cached in memory, so this is meant for desk-scale sample counts.
pub fn smo_train<F: Scalar>(
    samples: &[Vec<F>],
    labels: &[i8],
    kernel: KernelSpec<F>,
    params: &SmoParams<F>,
) -> Result<SvmModel<F>, SvmError> {
    let m = samples.len();
    if m == 0 {
        return Err(SvmError::EmptyTrainingSet);
    }
    assert_eq!(m, labels.len(), "one label per sample");
    let dim = samples[0].len();
    for (index, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(SvmError::DimensionMismatch { index, expected: dim, got: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(SvmError::NonFinite { index });
        }
    }
    for &l in labels {
        if l != 1 && l != -1 {
            return Err(SvmError::BadLabel(l));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(SvmError::SingleClass);
    }
    if samples.iter().all(|s| s == &samples[0]) {
        return Err(SvmError::DegenerateData);
    }

    let y: Vec<F> = labels.iter().map(|&l| cast(l as f64)).collect();
    let gram: Vec<F> = {
        let mut g = vec![F::zero(); m * m];
        for i in 0..m {
            for j in i..m {
                let v = kernel.eval(&samples[i], &samples[j]);
                g[i * m + j] = v;
                g[j * m + i] = v;
            }
        }
        g
    };

    let mut alpha = vec![F::zero(); m];

    // The violation test needs a bias; pair steps do not. Recentering the
    // bias on the KKT feasible interval at every sweep keeps the flagged set
    // honest, so going quiet means the returned model really is within tol.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut quiet_passes = 0usize;
    let mut sweeps = 0usize;
    while quiet_passes < params.max_passes {
        sweeps += 1;
        if sweeps > params.sweep_cap {
            return Err(SvmError::DidNotConverge { sweeps });
        }
        let bias = kkt_bias(&gram, &y, &alpha, params, m);
        let mut num_changed = 0usize;
        for i in 0..m {
            let e_i = decision(&gram, &y, &alpha, bias, m, i) - y[i];
            let r_i = y[i] * e_i;
            let violates = (r_i < -params.tol && alpha[i] < params.c)
                || (r_i > params.tol && alpha[i] > F::zero());
            if !violates {
                continue;
            }
            // Random partner first; if that pair cannot move, scan the rest
            // from the same random offset so a violating sample never
            // deadlocks on one blocked partner.
            let offset = rng.random_range(0..m);
            for t in 0..m {
                let j = (offset + t) % m;
                if j == i {
                    continue;
                }
                if try_pair(&gram, &y, labels, params, &mut alpha, m, i, j) {
                    num_changed += 1;
                    break;
                }
            }
        }
        if num_changed == 0 {
            quiet_passes += 1;
        } else {
            quiet_passes = 0;
        }
    }
    let bias = kkt_bias(&gram, &y, &alpha, params, m);

    let support_vectors: Vec<SupportVector<F>> = alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > F::zero())
        .map(|(index, &a)| SupportVector { x: samples[index].clone(), coeff: a * y[index], index })
        .collect();
    Ok(SvmModel::from_parts(kernel, support_vectors, bias, dim, params.c))
}

/// Largest violation of the SMO stopping conditions over a training set.
///
/// Zero (up to `tol`) means every sample satisfies the KKT conditions the
/// trainer optimizes for.
pub fn max_kkt_violation<F: Scalar>(
    model: &SvmModel<F>,
    samples: &[Vec<F>],
    labels: &[i8],
) -> F {
    let mut alpha = vec![F::zero(); samples.len()];
    for sv in model.support_vectors() {
        alpha[sv.index] = sv.coeff.abs();
    }
    let mut worst = F::zero();
    for (i, x) in samples.iter().enumerate() {
        let y: F = cast(labels[i] as f64);
        let e = model.score_kernel_sum(x).expect("dimension matches") - y;
        let r = y * e;
        if alpha[i] < model.box_constraint() {
            worst = worst.max(-r);
        }
        if alpha[i] > F::zero() {
            worst = worst.max(r);
        }
    }
    worst
}

/// Dual objective `sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`
/// for an explicit alpha vector.
pub fn dual_objective<F: Scalar>(
    samples: &[Vec<F>],
    labels: &[i8],
    alpha: &[F],
    kernel: &KernelSpec<F>,
) -> F {
    let mut obj = alpha.iter().copied().sum::<F>();
    let half: F = cast(0.5);
    for i in 0..samples.len() {
        if alpha[i] == F::zero() {
            continue;
        }
        for j in 0..samples.len() {
            if alpha[j] == F::zero() {
                continue;
            }
            let yy: F = cast((labels[i] * labels[j]) as f64);
            obj -= half * alpha[i] * alpha[j] * yy * kernel.eval(&samples[i], &samples[j]);
        }
    }
    obj
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn train_xy(
        samples: &[Vec<f64>],
        labels: &[i8],
        kernel: KernelSpec<f64>,
        c: f64,
        seed: u64,
    ) -> SvmModel<f64> {
        let params = SmoParams { c, seed, ..SmoParams::default() };
        smo_train(samples, labels, kernel, &params).unwrap()
    }

    #[test]
    fn two_point_problem_has_symmetric_margin() {
        let samples = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let labels = [-1, 1];
        let model = train_xy(&samples, &labels, KernelSpec::Linear, 10.0, 7);
        assert_eq!(model.support_vectors().len(), 2);
        let f_neg = model.score(&samples[0]).unwrap();
        let f_pos = model.score(&samples[1]).unwrap();
        assert!((f_neg + 1.0).abs() < 1e-2, "f(-) = {f_neg}");
        assert!((f_pos - 1.0).abs() < 1e-2, "f(+) = {f_pos}");
        // Midpoint of the segment sits on the decision plane.
        let mid = model.score(&[0.0, 0.0]).unwrap();
        assert!(mid.abs() < 1e-2, "f(mid) = {mid}");
    }

    #[test]
    fn separable_blobs_reach_zero_training_error() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..20 {
            samples.push(vec![rng.random::<f64>() - 3.0, rng.random::<f64>()]);
            labels.push(-1);
            samples.push(vec![rng.random::<f64>() + 3.0, rng.random::<f64>()]);
            labels.push(1);
        }
        let model = train_xy(&samples, &labels, KernelSpec::Linear, 100.0, 11);
        for (x, &y) in samples.iter().zip(&labels) {
            let f = model.score(x).unwrap();
            assert!(f.signum() as i8 == y, "misclassified {x:?}: f = {f}");
        }
        assert!(max_kkt_violation(&model, &samples, &labels) <= 1e-3 + 1e-9);
    }

    #[test]
    fn xor_with_rbf_kernel() {
        let samples = vec![
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        let labels = [-1, -1, 1, 1];
        let model = train_xy(&samples, &labels, KernelSpec::Rbf { gamma: 1.0 }, 10.0, 0);
        for (x, &y) in samples.iter().zip(&labels) {
            let f = model.score(x).unwrap();
            assert!(f.signum() as i8 == y, "XOR point {x:?} misclassified: f = {f}");
        }
    }

    #[test]
    fn linear_primal_and_dual_paths_agree() {
        let mut rng = StdRng::seed_from_u64(21);
        let samples: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![rng.random::<f64>() + if i % 2 == 0 { 1.5 } else { -1.5 }, rng.random()])
            .collect();
        let labels: Vec<i8> = (0..16).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let model = train_xy(&samples, &labels, KernelSpec::Linear, 1.0, 5);
        for _ in 0..50 {
            let x = vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
            let primal = model.score(&x).unwrap();
            let dual = model.score_kernel_sum(&x).unwrap();
            assert!((primal - dual).abs() < 1e-9, "primal {primal} vs dual {dual}");
        }
    }

    #[test]
    fn rbf_score_far_from_svs_decays_to_bias() {
        let samples = vec![vec![0.0], vec![1.0], vec![0.2], vec![0.8]];
        let labels = [-1, 1, -1, 1];
        let model = train_xy(&samples, &labels, KernelSpec::Rbf { gamma: 2.0 }, 5.0, 2);
        let far = model.score(&[1e4]).unwrap();
        assert!((far - model.bias()).abs() < 1e-12);
    }

    #[test]
    fn dual_feasibility_invariants() {
        let mut rng = StdRng::seed_from_u64(33);
        for trial in 0..20 {
            let n = 6 + (trial % 5) * 4;
            let samples: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let off = if i % 2 == 0 { 1.0 } else { -1.0 };
                    vec![rng.random::<f64>() + off, rng.random::<f64>() - off]
                })
                .collect();
            let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
            let model = train_xy(&samples, &labels, KernelSpec::Rbf { gamma: 0.7 }, 1.0, trial as u64);
            let mut sum = 0.0;
            for sv in model.support_vectors() {
                let a = sv.coeff.abs();
                assert!((0.0..=1.0 + 1e-12).contains(&a), "alpha out of box: {a}");
                sum += sv.coeff;
            }
            assert!(sum.abs() < 1e-6, "sum alpha_i y_i = {sum}");
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let params = SmoParams::default();
        let err = smo_train::<f64>(&[], &[], KernelSpec::Linear, &params);
        assert!(matches!(err, Err(SvmError::EmptyTrainingSet)));

        let err = smo_train(&[vec![0.0], vec![1.0]], &[1, 1], KernelSpec::Linear, &params);
        assert!(matches!(err, Err(SvmError::SingleClass)));

        let err = smo_train(&[vec![0.5], vec![0.5]], &[1, -1], KernelSpec::Linear, &params);
        assert!(matches!(err, Err(SvmError::DegenerateData)));

        let err = smo_train(&[vec![f64::NAN], vec![1.0]], &[1, -1], KernelSpec::Linear, &params);
        assert!(matches!(err, Err(SvmError::NonFinite { .. })));

        let model = train_xy(
            &[vec![0.0, 0.0], vec![1.0, 1.0]],
            &[-1, 1],
            KernelSpec::Linear,
            1.0,
            0,
        );
        assert!(matches!(model.score(&[1.0]), Err(SvmError::DimensionMismatch { .. })));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut rng = StdRng::seed_from_u64(9);
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![rng.random::<f64>() + (i % 2) as f64 * 2.0, rng.random()])
            .collect();
        let labels: Vec<i8> = (0..20).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
        let a = train_xy(&samples, &labels, KernelSpec::Rbf { gamma: 0.5 }, 2.0, 42);
        let b = train_xy(&samples, &labels, KernelSpec::Rbf { gamma: 0.5 }, 2.0, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn f32_instantiation_works() {
        let samples = vec![vec![0.0f32, 0.0], vec![2.0, 2.0]];
        let labels = [-1, 1];
        let params = SmoParams::<f32> { c: 10.0, seed: 1, ..SmoParams::default() };
        let model = smo_train(&samples, &labels, KernelSpec::Linear, &params).unwrap();
        assert!(model.score(&[2.0, 2.0]).unwrap() > 0.0);
        assert!(model.score(&[0.0, 0.0]).unwrap() < 0.0);
    }
}


