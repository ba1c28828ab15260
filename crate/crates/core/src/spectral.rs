//! Batch graphs and spectral regression targets.
//!
//! Each batch is turned into a fully connected Gaussian-affinity graph
//! `A(i,j) = exp(-d(i,j)² / 2σ²)` with a zero diagonal. The unnormalized
//! Laplacian `L = D - A` is decomposed densely, numerically-zero modes are
//! discarded and the next `k` eigenvectors become the targets the encoder
//! regresses onto.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DataBatch;
use crate::error::{Error, Result};
use crate::linalg;

/// Default relative threshold below which an eigenvalue counts as a zero mode.
pub const DEFAULT_ZERO_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub affinity: DMatrix<f64>,
    pub degree: DVector<f64>,
    pub laplacian: DMatrix<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTarget {
    /// `k × m`; row `r` is the `r`-th selected eigenvector.
    pub vectors: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub zero_modes_skipped: usize,
}

impl SpectralTarget {
    pub fn k(&self) -> usize {
        self.vectors.nrows()
    }
}

/// How the Gaussian width is chosen for each batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum SigmaPolicy {
    /// Median of the off-diagonal pairwise distances of the batch.
    #[default]
    Median,
    Fixed(f64),
}

pub fn pairwise_distances(batch: &DataBatch) -> Result<DMatrix<f64>> {
    if batch.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite feature entries"));
    }
    let x = &batch.features;
    let m = x.ncols();
    let mut d = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..j {
            let dist = x
                .column(i)
                .iter()
                .zip(x.column(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    Ok(d)
}

/// Median of the strictly upper-triangular entries.
pub fn median_distance(distances: &DMatrix<f64>) -> f64 {
    let m = distances.nrows();
    let mut vals: Vec<f64> = (0..m)
        .flat_map(|j| (0..j).map(move |i| (i, j)))
        .map(|(i, j)| distances[(i, j)])
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    let mid = vals.len() / 2;
    if vals.len() % 2 == 1 {
        vals[mid]
    } else {
        0.5 * (vals[mid - 1] + vals[mid])
    }
}

/// Resolves the width for a distance matrix. A degenerate median (all points
/// equal) falls back to 1.
pub fn resolve_sigma(policy: SigmaPolicy, distances: &DMatrix<f64>) -> Result<f64> {
    match policy {
        SigmaPolicy::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        SigmaPolicy::Fixed(s) => Err(Error::param(format!("sigma must be positive, got {s}"))),
        SigmaPolicy::Median => {
            let med = median_distance(distances);
            Ok(if med > 0.0 { med } else { 1.0 })
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::input(format!("{what} must be square, got {:?}", m.shape())));
    }
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::input(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

pub fn affinity(distances: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    check_symmetric(distances, "distance matrix")?;
    let denom = 2.0 * sigma * sigma;
    let m = distances.nrows();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            0.0
        } else {
            let d = distances[(i, j)];
            (-(d * d) / denom).exp()
        }
    }))
}

/// Degree vector and unnormalized Laplacian of a symmetric affinity matrix.
pub fn degree_laplacian(affinity: &DMatrix<f64>, sigma: f64) -> Result<BatchGraph> {
    check_symmetric(affinity, "affinity")?;
    if affinity.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::input("affinity entries must be finite and non-negative"));
    }
    let m = affinity.nrows();
    if (0..m).any(|i| affinity[(i, i)] != 0.0) {
        return Err(Error::input("affinity diagonal must be zero"));
    }
    let degree = DVector::from_fn(m, |i, _| affinity.row(i).sum());
    let mut laplacian = -affinity.clone();
    for i in 0..m {
        laplacian[(i, i)] = degree[i];
    }
    Ok(BatchGraph {
        affinity: affinity.clone(),
        degree,
        laplacian,
        sigma,
    })
}

pub fn batch_graph(batch: &DataBatch, policy: SigmaPolicy) -> Result<BatchGraph> {
    let d = pairwise_distances(batch)?;
    let sigma = resolve_sigma(policy, &d)?;
    degree_laplacian(&affinity(&d, sigma)?, sigma)
}

/// The `k` eigenvectors of the smallest eigenvalues above the zero-mode
/// threshold `zero_tol · λ_max`, ascending, each sign-fixed.
pub fn spectral_targets(graph: &BatchGraph, k: usize, zero_tol: f64) -> Result<SpectralTarget> {
    let l = &graph.laplacian;
    check_symmetric(l, "laplacian")?;
    let m = l.nrows();
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let (values, vectors) = linalg::sym_eigen(l)?;
    let lambda_max = values[m - 1];
    let cutoff = zero_tol * lambda_max.max(0.0);
    let zero_modes = values.iter().take_while(|&&v| v < cutoff || v <= 0.0).count();
    let available = m - zero_modes;
    if k > available {
        return Err(Error::InsufficientSpectrum {
            requested: k,
            available,
        });
    }

    let frob = l.norm();
    let mut out = DMatrix::zeros(k, m);
    let mut eigenvalues = Vec::with_capacity(k);
    for r in 0..k {
        let idx = zero_modes + r;
        let lambda = values[idx];
        let mut u = vectors.column(idx).into_owned();
        u /= u.norm();
        linalg::fix_sign(u.as_mut_slice());
        let residual = (l * &u - &u * lambda).norm();
        if residual > 1e-8 * frob {
            return Err(Error::Numerical(format!(
                "eigenpair {idx} residual {residual:e} exceeds tolerance"
            )));
        }
        out.row_mut(r).copy_from(&u.transpose());
        eigenvalues.push(lambda);
    }
    Ok(SpectralTarget {
        vectors: out,
        eigenvalues,
        zero_modes_skipped: zero_modes,
    })
}

/// Graph, targets, convenience for one batch.
pub fn batch_targets(batch: &DataBatch, policy: SigmaPolicy, k: usize, zero_tol: f64) -> Result<SpectralTarget> {
    spectral_targets(&batch_graph(batch, policy)?, k, zero_tol)
}
