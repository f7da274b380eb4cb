//! Distance-like functions induced by the SimO loss and executable checks of
//! their properties.
//!
//! * [`d_prime`] is `|a - b|^2 / (ε + (a . b)^2)`, the per-pair similar-branch
//!   ratio. It is non-negative, symmetric and zero exactly on the diagonal,
//!   but breaks the triangle inequality.
//! * [`d_double_prime`] is `(a . b)^2 / (ε + |a - b|^2)`, the dissimilar-branch
//!   ratio. It is non-negative and symmetric, but `d''(e, e) = |e|^4 / ε`
//!   is not zero for `e != 0`.
//!
//! The module also checks the orthogonal-set size bound (at most `n`
//! mutually orthogonal nonzero vectors in `R^n`) and provides a Gaussian
//! Johnson-Lindenstrauss projector for "nearly orthogonal" codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simo::{pair_terms, SimoError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemiMetricError {
    #[error(transparent)]
    Simo(#[from] SimoError),
    #[error("vector {0} is zero")]
    ZeroVector(usize),
    #[error("vectors have mixed dimensions")]
    RaggedVectors,
    #[error("JL distortion must lie in (0, 1), got {0}")]
    Distortion(f64),
    #[error("JL projection needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("JL constant must be positive, got {0}")]
    Constant(f64),
}

pub fn d_prime(a: &[f64], b: &[f64], epsilon: f64) -> Result<f64, SemiMetricError> {
    let t = pair_terms(a, b)?;
    Ok(t.d / (epsilon + t.o))
}

pub fn d_double_prime(a: &[f64], b: &[f64], epsilon: f64) -> Result<f64, SemiMetricError> {
    let t = pair_terms(a, b)?;
    Ok(t.o / (epsilon + t.d))
}

/// A triple for which `d'(x, z) > d'(x, y) + d'(y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleViolation {
    /// Trial index, or `None` for the fixed witness triple.
    pub trial: Option<usize>,
    /// Points ordered as `(x, y, z)` with `y` the intermediate point.
    pub points: [Vec<f64>; 3],
    /// `d'(x, z)`.
    pub lhs: f64,
    /// `d'(x, y) + d'(y, z)`.
    pub rhs: f64,
}

impl TriangleViolation {
    pub fn ratio(&self) -> f64 {
        self.lhs / self.rhs
    }
}

/// Property counts for `d''`. Its self-distance is reported rather than
/// treated as an identity violation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DoublePrimeReport {
    pub nonnegativity_violations: usize,
    pub symmetry_violations: usize,
    /// Sampled points `e` with `d''(e, e) != 0`.
    pub nonzero_self_distance: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SemiMetricReport {
    pub dim: usize,
    pub epsilon: f64,
    pub pairs_checked: usize,
    pub triples_checked: usize,
    pub nonnegativity_violations: usize,
    pub symmetry_violations: usize,
    pub identity_violations: usize,
    pub triangle_violation_count: usize,
    pub triangle_violations: Vec<TriangleViolation>,
    pub witness_violated: bool,
    pub double_prime: DoublePrimeReport,
}

impl SemiMetricReport {
    /// Whether every semi-metric property of `d'` held on the sampled points.
    pub fn semimetric_holds(&self) -> bool {
        self.nonnegativity_violations == 0
            && self.symmetry_violations == 0
            && self.identity_violations == 0
    }

    pub fn witness(&self) -> Option<&TriangleViolation> {
        self.triangle_violations.iter().find(|v| v.trial.is_none())
    }
}

/// The triple `(1,0), (0,1), (1,1)` zero-padded to `dim` coordinates.
pub fn witness_triple(dim: usize) -> [Vec<f64>; 3] {
    let dim = dim.max(2);
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut c = vec![0.0; dim];
    a[0] = 1.0;
    b[1] = 1.0;
    c[0] = 1.0;
    c[1] = 1.0;
    [a, b, c]
}

/// Checks the three orderings of a triple and returns the worst violation.
fn triangle_check(p: &[Vec<f64>; 3], epsilon: f64) -> Option<([usize; 3], f64, f64)> {
    let d = |i: usize, j: usize| d_prime(&p[i], &p[j], epsilon).expect("equal dims");
    let orders = [[0, 2, 1], [0, 1, 2], [1, 0, 2]];
    let mut worst: Option<([usize; 3], f64, f64)> = None;
    for [x, y, z] in orders {
        let lhs = d(x, z);
        let rhs = d(x, y) + d(y, z);
        if lhs > rhs && worst.is_none_or(|(_, l, r)| lhs / rhs > l / r) {
            worst = Some(([x, y, z], lhs, rhs));
        }
    }
    worst
}

/// Checks the semi-metric properties of `d'` (and reports on `d''`) over
/// `trials` pairs and triples drawn from `sample`, plus the fixed witness
/// triple.
pub fn verify_semimetric_with(
    mut sample: impl FnMut() -> Vec<f64>,
    dim: usize,
    trials: usize,
    epsilon: f64,
) -> SemiMetricReport {
    let mut report = SemiMetricReport {
        dim,
        epsilon,
        ..Default::default()
    };

    let witness = witness_triple(dim);
    report.triples_checked += 1;
    if let Some((order, lhs, rhs)) = triangle_check(&witness, epsilon) {
        report.witness_violated = true;
        report.triangle_violations.push(TriangleViolation {
            trial: None,
            points: order.map(|i| witness[i].clone()),
            lhs,
            rhs,
        });
    }

    for trial in 0..trials {
        let a = sample();
        let b = sample();
        report.pairs_checked += 1;
        let ab = d_prime(&a, &b, epsilon).expect("sampler dims");
        let ba = d_prime(&b, &a, epsilon).expect("sampler dims");
        if ab < 0.0 || ba < 0.0 {
            report.nonnegativity_violations += 1;
        }
        if ab != ba {
            report.symmetry_violations += 1;
        }
        let aa = d_prime(&a, &a, epsilon).expect("sampler dims");
        if aa != 0.0 || ((ab == 0.0) != (a == b)) {
            report.identity_violations += 1;
        }

        let ab2 = d_double_prime(&a, &b, epsilon).expect("sampler dims");
        let ba2 = d_double_prime(&b, &a, epsilon).expect("sampler dims");
        if ab2 < 0.0 || ba2 < 0.0 {
            report.double_prime.nonnegativity_violations += 1;
        }
        if ab2 != ba2 {
            report.double_prime.symmetry_violations += 1;
        }
        if d_double_prime(&a, &a, epsilon).expect("sampler dims") != 0.0 {
            report.double_prime.nonzero_self_distance += 1;
        }

        let triple = [a, b, sample()];
        report.triples_checked += 1;
        if let Some((order, lhs, rhs)) = triangle_check(&triple, epsilon) {
            report.triangle_violations.push(TriangleViolation {
                trial: Some(trial),
                points: order.map(|i| triple[i].clone()),
                lhs,
                rhs,
            });
        }
    }
    report.triangle_violation_count = report.triangle_violations.len();
    report
}

/// [`verify_semimetric_with`] over points drawn uniformly from `[0,1]^dim`.
pub fn verify_semimetric<R: Rng>(rng: &mut R, dim: usize, trials: usize, epsilon: f64) -> SemiMetricReport {
    verify_semimetric_with(|| (0..dim).map(|_| rng.random::<f64>()).collect(), dim, trials, epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityBound {
    pub dim: usize,
    pub vectors: usize,
    pub max_mutually_orthogonal_size: usize,
    /// Whether the search was exhaustive (`vectors <= EXHAUSTIVE_LIMIT`).
    pub exact: bool,
    pub bound_holds: bool,
}

/// Orthonormalizes `vectors` in order, dropping any that are numerically
/// dependent on the ones before.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        // two passes keep the result orthogonal to machine precision
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 {
            basis.push(w.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// A random orthonormal basis of `R^dim` followed by `extra` decoys: scaled
/// copies of basis vectors and dense Gaussian vectors. No subset of the
/// result exceeds `dim` mutually orthogonal vectors.
pub fn orthogonal_construction<R: Rng>(rng: &mut R, dim: usize, extra: usize) -> Vec<Vec<f64>> {
    let gaussian = |rng: &mut R| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let mut basis = Vec::new();
    while basis.len() < dim {
        let raw: Vec<Vec<f64>> = (0..dim).map(|_| gaussian(rng)).collect();
        basis = gram_schmidt(&raw);
    }
    let mut out = basis.clone();
    for i in 0..extra {
        if i % 2 == 0 {
            let scale = rng.random_range(0.5..2.0);
            out.push(basis[rng.random_range(0..dim)].iter().map(|x| x * scale).collect());
        } else {
            out.push(gaussian(rng));
        }
    }
    out
}

/// Largest vector count for which the subset search is exhaustive.
pub const EXHAUSTIVE_LIMIT: usize = 20;

/// Finds the largest subset of `vectors` whose pairwise `|dot|` are all at most
/// `tolerance`, and checks that it does not exceed the dimension.
pub fn verify_orthogonality_bound(
    vectors: &[Vec<f64>],
    tolerance: f64,
) -> Result<OrthogonalityBound, SemiMetricError> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(SemiMetricError::RaggedVectors);
    }
    if let Some(i) = vectors.iter().position(|v| v.iter().all(|&x| x == 0.0)) {
        return Err(SemiMetricError::ZeroVector(i));
    }
    let k = vectors.len();
    let compatible: Vec<Vec<bool>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    i != j && {
                        let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                        dot.abs() <= tolerance
                    }
                })
                .collect()
        })
        .collect();

    let exact = k <= EXHAUSTIVE_LIMIT;
    let size = if exact {
        let mut best = 0;
        let mut current = Vec::new();
        max_clique(&compatible, (0..k).collect(), &mut current, &mut best);
        best
    } else {
        greedy_clique(&compatible)
    };
    Ok(OrthogonalityBound {
        dim,
        vectors: k,
        max_mutually_orthogonal_size: size,
        exact,
        bound_holds: size <= dim,
    })
}

fn max_clique(adj: &[Vec<bool>], candidates: Vec<usize>, current: &mut Vec<usize>, best: &mut usize) {
    if current.len() + candidates.len() <= *best {
        return;
    }
    if candidates.is_empty() {
        *best = (*best).max(current.len());
        return;
    }
    for (pos, &v) in candidates.iter().enumerate() {
        if current.len() + candidates.len() - pos <= *best {
            return;
        }
        let next: Vec<usize> = candidates[pos + 1..].iter().copied().filter(|&u| adj[v][u]).collect();
        current.push(v);
        max_clique(adj, next, current, best);
        current.pop();
    }
}

fn greedy_clique(adj: &[Vec<bool>]) -> usize {
    let k = adj.len();
    (0..k)
        .map(|start| {
            let mut set = vec![start];
            for v in 0..k {
                if v != start && set.iter().all(|&u| adj[u][v]) {
                    set.push(v);
                }
            }
            set.len()
        })
        .max()
        .unwrap_or(0)
}

/// Default constant in `m = ceil(C ln k / ε^2)`.
pub const DEFAULT_JL_CONSTANT: f64 = 8.0;

/// Random Gaussian projection `R^n -> R^m`, entries `N(0, 1) / sqrt(m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlProjector {
    pub source_dim: usize,
    pub target_dim: usize,
    pub distortion: f64,
    pub constant: f64,
    pub seed: u64,
    /// Row-major `target_dim x source_dim`.
    pub matrix: Vec<f64>,
}

/// Target dimension for `points` points at distortion `distortion`.
pub fn jl_target_dim(points: usize, distortion: f64, constant: f64) -> usize {
    (constant * (points as f64).ln() / (distortion * distortion)).ceil() as usize
}

impl JlProjector {
    pub fn new(
        source_dim: usize,
        points: usize,
        distortion: f64,
        constant: f64,
        seed: u64,
    ) -> Result<Self, SemiMetricError> {
        if !(distortion > 0.0 && distortion < 1.0) {
            return Err(SemiMetricError::Distortion(distortion));
        }
        if points < 2 {
            return Err(SemiMetricError::TooFewVectors(points));
        }
        if !(constant > 0.0 && constant.is_finite()) {
            return Err(SemiMetricError::Constant(constant));
        }
        let target_dim = jl_target_dim(points, distortion, constant);
        let scale = 1.0 / (target_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..target_dim * source_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Ok(Self {
            source_dim,
            target_dim,
            distortion,
            constant,
            seed,
            matrix,
        })
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, SemiMetricError> {
        if v.len() != self.source_dim {
            return Err(SimoError::DimensionMismatch {
                left: self.source_dim,
                right: v.len(),
            }
            .into());
        }
        Ok(self
            .matrix
            .chunks(self.source_dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Projects `vectors` with a freshly drawn Gaussian JL map.
pub fn jl_project(
    vectors: &[Vec<f64>],
    distortion: f64,
    constant: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, JlProjector), SemiMetricError> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(SemiMetricError::RaggedVectors);
    }
    let projector = JlProjector::new(dim, vectors.len(), distortion, constant, seed)?;
    let projected = vectors.iter().map(|v| projector.project(v)).collect::<Result<_, _>>()?;
    Ok((projected, projector))
}

/// Pairwise checks of a projection against the JL guarantees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlCheck {
    pub pairs: usize,
    /// Pairs with `(1-ε)|x-y|^2 <= |f(x)-f(y)|^2 <= (1+ε)|x-y|^2`.
    pub distance_within: usize,
    /// Pairs with `|f(x) . f(y)| <= ε (|x|^2 + |y|^2)`.
    pub dot_within: usize,
}

impl JlCheck {
    pub fn distance_fraction(&self) -> f64 {
        self.distance_within as f64 / self.pairs.max(1) as f64
    }

    pub fn dot_fraction(&self) -> f64 {
        self.dot_within as f64 / self.pairs.max(1) as f64
    }
}

pub fn check_jl(original: &[Vec<f64>], projected: &[Vec<f64>], distortion: f64) -> JlCheck {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut check = JlCheck {
        pairs: 0,
        distance_within: 0,
        dot_within: 0,
    };
    for i in 0..original.len() {
        for j in i + 1..original.len() {
            check.pairs += 1;
            let before = sq(&original[i], &original[j]);
            let after = sq(&projected[i], &projected[j]);
            if (1.0 - distortion) * before <= after && after <= (1.0 + distortion) * before {
                check.distance_within += 1;
            }
            let bound = distortion * (dot(&original[i], &original[i]) + dot(&original[j], &original[j]));
            if dot(&projected[i], &projected[j]).abs() <= bound {
                check.dot_within += 1;
            }
        }
    }
    check
}
