//! 2-D projections of feature vectors: PCA and exact t-SNE.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl ProjectionMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" => Ok(ProjectionMethod::Tsne),
            other => Err(Error::Config(format!("unknown projection `{other}`; expected pca or tsne"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<i64>,
}

fn to_matrix(features: &Tensor) -> Result<DMatrix<f64>> {
    let s = features.size();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("features must be (N, d), got {s:?}")));
    }
    let v = Vec::<f64>::try_from(features.to_kind(Kind::Double).contiguous().view([-1]))?;
    Ok(DMatrix::from_row_slice(s[0] as usize, s[1] as usize, &v))
}

pub fn feature_projection_2d(features: &Tensor, labels: &[i64], method: ProjectionMethod, seed: u64) -> Result<Projection> {
    let x = to_matrix(features)?;
    if x.nrows() != labels.len() {
        return Err(Error::Dimension(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if x.nrows() < 3 {
        return Err(Error::Insufficient(format!("projection needs N >= 3, got {}", x.nrows())));
    }
    let y = match method {
        ProjectionMethod::Pca => pca_2d(&x)?,
        ProjectionMethod::Tsne => tsne_2d(&x, 30.0, 1000, seed),
    };
    Ok(Projection {
        points: (0..y.nrows()).map(|i| [y[(i, 0)], y[(i, 1)]]).collect(),
        labels: labels.to_vec(),
    })
}

/// Projection of centered rows onto the two leading principal axes. Axis
/// signs are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64);
    if cov.trace() <= 1e-12 {
        return Err(Error::Numerical("zero-variance features; PCA undefined".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let d = x.ncols();
    let mut axes = DMatrix::<f64>::zeros(d, 2);
    for (k, &j) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(j).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        axes.set_column(k, &v);
    }
    Ok(c * axes)
}

fn row_sq_dists(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional affinities with per-point bandwidths found by bisection
/// so each row has the requested perplexity.
fn affinities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let row = &d[i * n..(i + 1) * n];
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-row[j] * beta).exp();
                    sum += w;
                    hsum += row[j] * w;
                }
            }
            let sum = sum.max(1e-300);
            let h = sum.ln() + beta * hsum / sum;
            let diff = h - target;
            if diff.abs() < 1e-6 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-row[j] * beta).exp();
                p[i * n + j] = w;
                sum += w;
            }
        }
        for j in 0..n {
            p[i * n + j] /= sum.max(1e-300);
        }
    }
    p
}

/// Exact t-SNE. Perplexity is capped at `(N − 1) / 3`.
pub fn tsne_2d(x: &DMatrix<f64>, perplexity: f64, iters: usize, seed: u64) -> DMatrix<f64> {
    let n = x.nrows();
    let perp = perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    // scale-free distances keep the bisection well conditioned
    let mut d = row_sq_dists(x);
    let dmax = d.iter().cloned().fold(0.0, f64::max).max(1e-12);
    d.iter_mut().for_each(|v| *v /= dmax);
    let cond = affinities(&d, n, perp);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut r = rng::rng(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            [a * 1e-4, b * 1e-4]
        })
        .collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let lr = (n as f64 / 12.0).max(50.0).min(200.0);
    let mut q = vec![0.0; n * n];
    for t in 0..iters {
        let exag = if t < 250 { 12.0 } else { 1.0 };
        let momentum = if t < 250 { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
        }
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let m = (exag * p[i * n + j] - w / qsum) * w;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (vel[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                vel[i][k] = momentum * vel[i][k] - lr * gains[i][k] * g[k];
            }
        }
        let mut mean = [0.0; 2];
        for i in 0..n {
            for k in 0..2 {
                y[i][k] += vel[i][k];
                mean[k] += y[i][k] / n as f64;
            }
        }
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    DMatrix::from_fn(n, 2, |i, k| y[i][k])
}

/// Mean silhouette coefficient of 2-D points under the given labels.
pub fn silhouette(points: &[[f64; 2]], labels: &[i64]) -> f64 {
    let n = points.len();
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: i64| {
            let (s, k) = (0..n)
                .filter(|&j| j != i && labels[j] == c)
                .fold((0.0, 0usize), |(s, k), j| (s + dist(&points[i], &points[j]), k + 1));
            (k > 0).then(|| s / k as f64)
        };
        let a = mean_to(labels[i]).unwrap_or(0.0);
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    x: f64,
    y: f64,
    label: i64,
    source: &'a str,
}

/// Writes `x,y,label,source` rows.
pub fn write_projection_csv(path: &Path, proj: &Projection, sources: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    for (i, p) in proj.points.iter().enumerate() {
        let source = sources.get(i).map(String::as_str).unwrap_or("");
        w.serialize(CsvRow {
            x: p[0],
            y: p[1],
            label: proj.labels[i],
            source,
        })
        .map_err(|e| Error::load(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
