//! Independent reference implementations shared by the integration tests.
//! Everything here is written as plain loops over `Vec<f64>` and uses
//! nothing from the library except accessors for its data.
#![allow(dead_code)]

use simo::diff::Tensor;
use simo::model::ModelParams;

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.row_iter().map(|r| r.to_vec()).collect()
}

/// SimO loss by explicit double loop over `i < j`.
pub fn naive_simo(rows: &[Vec<f64>], y: f64, eps: f64) -> f64 {
    let m = rows.len();
    let mut sum_d = 0.0;
    let mut sum_o = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let mut d = 0.0;
            let mut dot = 0.0;
            for k in 0..rows[i].len() {
                let diff = rows[i][k] - rows[j][k];
                d += diff * diff;
                dot += rows[i][k] * rows[j][k];
            }
            sum_d += d;
            sum_o += dot * dot;
            pairs += 1;
        }
    }
    (y * sum_d / (eps + sum_o) + (1.0 - y) * sum_o / (eps + sum_d)) / pairs as f64
}

/// Three-term loss of a class-major block of `n` classes with `k` rows each.
/// Returns `(similar, mean_dissimilar, dissimilar, total)`.
pub fn naive_afcl(rows: &[Vec<f64>], n: usize, k: usize, olean: f64, eps: f64) -> (f64, f64, f64, f64) {
    let dim = rows[0].len();
    let mut similar = 0.0;
    for c in 0..n {
        let block: Vec<Vec<f64>> = (0..k).map(|j| rows[c * k + j].clone()).collect();
        similar += naive_simo(&block, 1.0, eps);
    }
    let mut means = Vec::new();
    for c in 0..n {
        let mut mean = vec![0.0; dim];
        for j in 0..k {
            for t in 0..dim {
                mean[t] += rows[c * k + j][t];
            }
        }
        for v in &mut mean {
            *v /= k as f64;
        }
        means.push(mean);
    }
    let mean_dissimilar = naive_simo(&means, olean, eps);
    let mut dissimilar = 0.0;
    for j in 0..k {
        let group: Vec<Vec<f64>> = (0..n).map(|c| rows[c * k + j].clone()).collect();
        dissimilar += naive_simo(&group, olean, eps);
    }
    (similar, mean_dissimilar, dissimilar, similar + mean_dissimilar + dissimilar)
}

/// Encoder forward pass: dense, layer norm, relu per hidden layer, then
/// dense and logistic.
pub fn naive_encode(params: &ModelParams, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dense = params.dense();
    let norms = params.norms();
    inputs
        .iter()
        .map(|x| {
            let mut h = x.clone();
            for (layer, d) in dense.iter().enumerate() {
                let (fan_in, fan_out) = (d.weight.rows(), d.weight.cols());
                let mut z = vec![0.0; fan_out];
                for o in 0..fan_out {
                    let mut acc = 0.0;
                    for i in 0..fan_in {
                        acc += h[i] * d.weight.data()[i * fan_out + o];
                    }
                    z[o] = acc + d.bias.data()[o];
                }
                h = if layer < norms.len() {
                    let n = z.len() as f64;
                    let mean = z.iter().sum::<f64>() / n;
                    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let sd = (var + 1e-5).sqrt();
                    z.iter()
                        .enumerate()
                        .map(|(j, v)| ((v - mean) / sd * norms[layer].gamma.data()[j] + norms[layer].beta.data()[j]).max(0.0))
                        .collect()
                } else {
                    z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
                };
            }
            h
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Effective rank from singular values taken as square roots of the
/// eigenvalues of the smaller Gram matrix, `A A^T` or `A^T A`.
pub fn oracle_effective_rank(rows: &[Vec<f64>]) -> f64 {
    let cols = rows[0].len();
    let gram: Vec<Vec<f64>> = if rows.len() <= cols {
        rows.iter()
            .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect()
    } else {
        (0..cols)
            .map(|i| (0..cols).map(|j| rows.iter().map(|r| r[i] * r[j]).sum()).collect())
            .collect()
    };
    let singular: Vec<f64> = jacobi_eigenvalues(gram).into_iter().map(|l| l.max(0.0).sqrt()).collect();
    let total: f64 = singular.iter().sum();
    let entropy: f64 = singular
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    entropy.exp()
}

/// Leave-nothing-out nearest-centroid accuracy of `test` against centroids
/// of `train`.
pub fn nearest_centroid_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
) -> f64 {
    let classes = train_labels.iter().max().unwrap() + 1;
    let dim = train[0].len();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0.0; classes];
    for (r, &l) in train.iter().zip(train_labels) {
        counts[l] += 1.0;
        for t in 0..dim {
            centroids[l][t] += r[t];
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n;
        }
    }
    let correct = test
        .iter()
        .zip(test_labels)
        .filter(|(r, &l)| {
            let dist = |c: &Vec<f64>| c.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).partial_cmp(&dist(&centroids[b])).unwrap())
                .unwrap();
            best == l
        })
        .count();
    correct as f64 / test.len() as f64
}
