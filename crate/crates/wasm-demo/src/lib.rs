//! Browser bindings: 2-D points in, cluster labels or neighbour edges out.
//!
//! Points travel as flat `[x0, y0, x1, y1, …]` arrays. The plain functions
//! are usable (and tested) natively; the `#[wasm_bindgen]` wrappers only
//! convert errors.

use nalgebra::DMatrix;
use sadse::clustering::kmeans;
use sadse::data::{synth_blobs, BlobSpec, DataBatch};
use sadse::linalg::sym_eigen;
use sadse::selfexpr::{knn_sparsify, lasso_selfexpr};
use sadse::spectral::{batch_graph, SigmaPolicy};
use wasm_bindgen::prelude::*;

const RESTARTS: usize = 10;
const MAX_ITER: usize = 300;

fn points(flat: &[f64]) -> Result<DMatrix<f64>, String> {
    if !flat.len().is_multiple_of(2) || flat.len() < 4 {
        return Err("expected an even-length array holding at least two points".into());
    }
    Ok(DMatrix::from_column_slice(2, flat.len() / 2, flat))
}

fn labels_u32(l: &[usize]) -> Vec<u32> {
    l.iter().map(|&v| v as u32).collect()
}

/// Gaussian blobs in the plane as flat coordinates, cluster by cluster;
/// [`blob_labels`] gives the matching labels.
pub fn blobs(n_clusters: usize, points_per: usize, separation: f64, noise: f64, seed: u64) -> Result<Vec<f64>, String> {
    let ds = synth_blobs(
        &BlobSpec {
            n_ambient: 2,
            n_clusters,
            points_per,
            center_sep: separation,
            noise_sigma: noise,
        },
        seed,
    )
    .map_err(|e| e.to_string())?;
    Ok(ds.features.as_slice().to_vec())
}

pub fn blob_labels(n_clusters: usize, points_per: usize) -> Vec<u32> {
    (0..n_clusters as u32)
        .flat_map(|c| std::iter::repeat_n(c, points_per))
        .collect()
}

pub fn kmeans_points(flat: &[f64], n_clusters: usize, seed: u64) -> Result<Vec<u32>, String> {
    let x = points(flat)?;
    let res = kmeans(&x, n_clusters, RESTARTS, MAX_ITER, seed).map_err(|e| e.to_string())?;
    Ok(labels_u32(&res.labels))
}

/// Spectral clustering of all points as one batch; `sigma <= 0` selects the
/// median pairwise distance. Uses the bottom `n_clusters` eigenvectors of the
/// unnormalised Laplacian, zero modes included: on well-separated clusters
/// those modes are the cluster indicators.
pub fn spectral_points(flat: &[f64], n_clusters: usize, sigma: f64, seed: u64) -> Result<Vec<u32>, String> {
    let x = points(flat)?;
    let m = x.ncols();
    if n_clusters == 0 || n_clusters > m {
        return Err(format!("cannot form {n_clusters} clusters from {m} points"));
    }
    let batch = DataBatch::new(x, None, 0).map_err(|e| e.to_string())?;
    let policy = if sigma > 0.0 {
        SigmaPolicy::Fixed(sigma)
    } else {
        SigmaPolicy::Median
    };
    let graph = batch_graph(&batch, policy).map_err(|e| e.to_string())?;
    let (_, vectors) = sym_eigen(&graph.laplacian).map_err(|e| e.to_string())?;
    let embedding = vectors.columns(0, n_clusters).transpose();
    let res = kmeans(&embedding, n_clusters, RESTARTS, MAX_ITER, seed).map_err(|e| e.to_string())?;
    Ok(labels_u32(&res.labels))
}

/// Lasso self-expression of each point, sparsified to its strongest
/// `neighbors` coefficients; returns `[from0, to0, from1, to1, …]`.
pub fn lasso_edges(flat: &[f64], lambda: f64, neighbors: usize) -> Result<Vec<u32>, String> {
    let x = points(flat)?;
    let batch = DataBatch::new(x, None, 0).map_err(|e| e.to_string())?;
    let h = lasso_selfexpr(&batch, lambda, 500, 1e-8).map_err(|e| e.to_string())?;
    let s = knn_sparsify(&h.coefficients, neighbors).map_err(|e| e.to_string())?;
    let mut edges = Vec::new();
    for i in 0..s.ncols() {
        for j in 0..s.nrows() {
            if s[(j, i)] != 0.0 && h.coefficients[(j, i)] != 0.0 {
                edges.extend([i as u32, j as u32]);
            }
        }
    }
    Ok(edges)
}

#[wasm_bindgen(js_name = blobs)]
pub fn blobs_js(
    n_clusters: usize,
    points_per: usize,
    separation: f64,
    noise: f64,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    blobs(n_clusters, points_per, separation, noise, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = blobLabels)]
pub fn blob_labels_js(n_clusters: usize, points_per: usize) -> Vec<u32> {
    blob_labels(n_clusters, points_per)
}

#[wasm_bindgen(js_name = kmeans)]
pub fn kmeans_js(points: &[f64], n_clusters: usize, seed: u32) -> Result<Vec<u32>, JsError> {
    kmeans_points(points, n_clusters, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = spectral)]
pub fn spectral_js(points: &[f64], n_clusters: usize, sigma: f64, seed: u32) -> Result<Vec<u32>, JsError> {
    spectral_points(points, n_clusters, sigma, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lassoEdges)]
pub fn lasso_edges_js(points: &[f64], lambda: f64, neighbors: usize) -> Result<Vec<u32>, JsError> {
    lasso_edges(points, lambda, neighbors).map_err(|e| JsError::new(&e))
}
