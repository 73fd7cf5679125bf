//! Two-dimensional PCA projection of features and prototypes.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const POWER_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 100_000;

/// Centering mean and the top two principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn cov_apply(cov: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    cov.iter().map(|row| dot(row, v)).collect()
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration from
/// `start`.
fn power_iteration(cov: &[Vec<f64>], mut v: Vec<f64>) -> (Vec<f64>, f64) {
    normalize(&mut v);
    for _ in 0..MAX_ITERS {
        let mut next = cov_apply(cov, &v);
        if normalize(&mut next) == 0.0 {
            return (v, 0.0);
        }
        if dot(&next, &v) < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let delta = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let lambda = dot(&v, &cov_apply(cov, &v));
    (v, lambda)
}

/// Any unit vector orthogonal to `u`.
fn orthogonal_to(u: &[f64]) -> Vec<f64> {
    for i in 0..u.len() {
        let mut e = vec![0.0; u.len()];
        e[i] = 1.0;
        let p = dot(&e, u);
        e.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        if normalize(&mut e) > 1e-6 {
            return e;
        }
    }
    vec![0.0; u.len()]
}

impl Pca2 {
    /// Fit on `rows`. Fewer than two distinct rows is an error.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d < 2 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("pca", "need rows of equal width >= 2"));
        }
        if rows.iter().all(|r| r == &rows[0]) {
            return Err(Error::Contract("projection needs at least two distinct points".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for r in &centred {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += r[i] * r[j] / n;
                }
            }
        }
        let largest = |vs: &[Vec<f64>]| -> Vec<f64> {
            vs.iter()
                .fold((0.0, vec![0.0; d]), |(bn, bv), v| {
                    let nv = dot(v, v);
                    if nv > bn { (nv, v.clone()) } else { (bn, bv) }
                })
                .1
        };
        let (c1, l1) = power_iteration(&cov, largest(&centred));
        for (i, row) in cov.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x -= l1 * c1[i] * c1[j];
            }
        }
        let residual: Vec<Vec<f64>> = centred
            .iter()
            .map(|r| {
                let p = dot(r, &c1);
                r.iter().zip(&c1).map(|(x, c)| x - p * c).collect()
            })
            .collect();
        let mut start = largest(&residual);
        if dot(&start, &start) < 1e-24 {
            start = orthogonal_to(&c1);
        }
        let (mut c2, l2) = power_iteration(&cov, start);
        // Keep the second axis exactly orthogonal to the first.
        let p = dot(&c2, &c1);
        c2.iter_mut().zip(&c1).for_each(|(x, c)| *x -= p * c);
        if normalize(&mut c2) == 0.0 {
            c2 = orthogonal_to(&c1);
        }
        Ok(Self {
            mean,
            components: [c1, c2],
            variances: [l1, l2.max(0.0)],
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.mean.len() {
            return Err(Error::dim("pca project", format!("{} vs {}", x.len(), self.mean.len())));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok([dot(&c, &self.components[0]), dot(&c, &self.components[1])])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingPoint {
    pub x: f64,
    pub y: f64,
    pub label: ClassId,
    pub prototype: bool,
}

/// Fit PCA on `features`, project features and `prototypes`, and write
/// `x,y,label,kind` rows to `out_path`.
pub fn export_embeddings(
    features: &[(Vec<f64>, ClassId)],
    prototypes: &[(Vec<f64>, ClassId)],
    out_path: Option<&Path>,
) -> Result<Vec<EmbeddingPoint>> {
    let rows: Vec<Vec<f64>> = features.iter().map(|(f, _)| f.clone()).collect();
    let pca = Pca2::fit(&rows)?;
    let mut points = Vec::with_capacity(features.len() + prototypes.len());
    for (set, prototype) in [(features, false), (prototypes, true)] {
        for (f, label) in set {
            let [x, y] = pca.project(f)?;
            points.push(EmbeddingPoint { x, y, label: *label, prototype });
        }
    }
    if let Some(path) = out_path {
        let mut csv = String::from("x,y,label,kind\n");
        for p in &points {
            let kind = if p.prototype { "prototype" } else { "sample" };
            writeln!(csv, "{:.9},{:.9},{},{kind}", p.x, p.y, p.label).expect("string write");
        }
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(points)
}
