//! Two-component PCA by power iteration with deflation.

use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-9;
pub const MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit loadings; the first nonzero entry of each is positive.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    /// `N` rows of (pc1, pc2) coordinates.
    pub projection: Vec<[f64; 2]>,
    pub warning: Option<String>,
}

type Matrix = Vec<Vec<f64>>;

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().flatten().fold(0.0, |a, &b| a.max(b.abs()))
}

fn orient(v: &mut [f64]) {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Dominant eigenpair of a symmetric PSD matrix. Returns `None` when the
/// matrix is numerically zero.
fn dominant(c: &Matrix, scale: f64) -> Option<(f64, Vec<f64>)> {
    let n = c.len();
    if max_abs(c) <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return None;
    }
    // Repeated squaring drives C^(2^k) towards a rank-one projector, which
    // gives a good start even when the top two eigenvalues are close.
    let mut p = c.clone();
    for _ in 0..60 {
        let s = max_abs(&p);
        let next: Matrix = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| p[i][k] * p[k][j]).sum::<f64>() / (s * s)).collect())
            .collect();
        let diff = next
            .iter()
            .flatten()
            .zip(p.iter().flatten())
            .fold(0.0f64, |a, (x, y)| a.max((x / max_abs(&next) - y / s).abs()));
        p = next;
        if diff < TOLERANCE {
            break;
        }
    }
    let col = (0..n)
        .max_by(|&a, &b| {
            let na: f64 = p.iter().map(|r| r[a] * r[a]).sum();
            let nb: f64 = p.iter().map(|r| r[b] * r[b]).sum();
            na.total_cmp(&nb)
        })
        .unwrap_or(0);
    let mut v: Vec<f64> = p.iter().map(|r| r[col]).collect();
    let nv = norm(&v);
    if nv == 0.0 {
        v = vec![0.0; n];
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= nv);
    }
    for _ in 0..MAX_ITER {
        let w = mat_vec(c, &v);
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        let w: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let sign = if dot(&w, &v) < 0.0 { -1.0 } else { 1.0 };
        let delta = w.iter().zip(&v).fold(0.0f64, |a, (x, y)| a.max((sign * x - y).abs()));
        v = w.iter().map(|x| sign * x).collect();
        if delta < TOLERANCE {
            break;
        }
    }
    let lambda = dot(&v, &mat_vec(c, &v));
    Some((lambda, v))
}

/// A unit vector orthogonal to `v`, taken from the standard basis.
fn orthogonal_to(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let d = dot(&e, v);
            e.iter_mut().zip(v).for_each(|(x, y)| *x -= d * y);
            e
        })
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .map(|e| {
            let ne = norm(&e);
            e.iter().map(|x| x / ne).collect()
        })
        .unwrap_or_default()
}

pub fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let n = rows.len() as f64;
    let j = rows[0].len();
    let mean: Vec<f64> = (0..j).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; j]; j];
    for r in rows {
        for a in 0..j {
            for b in 0..j {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    (mean, cov)
}

pub fn pca_project(rows: &[Vec<f64>]) -> Result<Pca> {
    if rows.len() < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {}", rows.len())));
    }
    let j = rows[0].len();
    if j == 0 || rows.iter().any(|r| r.len() != j) {
        return Err(Error::Invalid("PCA rows must share a nonzero width".into()));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("PCA input is not finite".into()));
    }
    let (mean, cov) = covariance(rows);
    let scale = (0..j).map(|i| cov[i][i]).sum::<f64>();
    let Some((l1, mut v1)) = dominant(&cov, scale) else {
        return Ok(Pca {
            mean,
            components: [vec![0.0; j], vec![0.0; j]],
            eigenvalues: [0.0, 0.0],
            projection: vec![[0.0, 0.0]; rows.len()],
            warning: Some("data has rank 0; projection is zero".into()),
        });
    };
    let deflated: Matrix = (0..j)
        .map(|a| (0..j).map(|b| cov[a][b] - l1 * v1[a] * v1[b]).collect())
        .collect();
    let (l2, mut v2) = match (j > 1).then(|| dominant(&deflated, scale)).flatten() {
        Some((l, v)) => {
            // re-orthogonalize against round-off from deflation
            let d = dot(&v, &v1);
            let mut v: Vec<f64> = v.iter().zip(&v1).map(|(x, y)| x - d * y).collect();
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            (l.max(0.0), v)
        }
        None if j > 1 => (0.0, orthogonal_to(&v1)),
        None => (0.0, vec![0.0]),
    };
    orient(&mut v1);
    orient(&mut v2);
    let projection = rows
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [dot(&c, &v1), dot(&c, &v2)]
        })
        .collect();
    Ok(Pca {
        mean,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        projection,
        warning: None,
    })
}
