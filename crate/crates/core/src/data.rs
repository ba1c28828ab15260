//! Datasets, batching, splits, PCA and synthetic generators.
//!
//! Samples are stored column-wise: a dataset with `n` features and `N`
//! samples is an `n × N` matrix, and point `i` is column `i`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const MATRIX_MAGIC: &[u8; 4] = b"SADM";
const MATRIX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    File(String),
    Synthetic(String),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: Option<Vec<usize>>,
        name: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.ncols() {
                return Err(Error::input(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.ncols()
                )));
            }
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite feature at row {}, column {}",
                pos % features.nrows(),
                pos / features.nrows()
            )));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
            provenance,
        })
    }

    pub fn n_features(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.features.ncols()
    }

    /// Number of distinct classes, taken as `max(label) + 1`.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// New dataset made of the given sample columns, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// One mini-batch of `m` points, column-stacked.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub batch_id: usize,
    /// Column indices of these points in the source dataset.
    pub indices: Vec<usize>,
}

impl DataBatch {
    pub fn new(features: DMatrix<f64>, labels: Option<Vec<usize>>, batch_id: usize) -> Result<Self> {
        let m = features.ncols();
        let batch = Self {
            indices: (0..m).collect(),
            features,
            labels,
            batch_id,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.features.ncols();
        if m < 2 {
            return Err(Error::input(format!("batch needs at least 2 points, got {m}")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("batch contains non-finite features"));
        }
        if let Some(l) = &self.labels {
            if l.len() != m {
                return Err(Error::input(format!("{} labels for {m} points", l.len())));
            }
        }
        if self.indices.len() != m {
            return Err(Error::input("index list does not match batch width"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }
}

/// Seeded partition of `[0, N)` into contiguous chunks of a shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(n_samples: usize, batch_size: usize, drop_last: bool, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::param(format!("batch size must be at least 2, got {batch_size}")));
        }
        if batch_size > n_samples {
            return Err(Error::param(format!(
                "batch size {batch_size} exceeds sample count {n_samples}"
            )));
        }
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            batch_size,
            order,
            drop_last,
        })
    }

    /// Index chunks in batch order. A trailing chunk shorter than two points
    /// cannot form a graph and is merged into the previous chunk.
    pub fn chunks(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.order.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        if let Some(last) = out.last() {
            if last.len() < self.batch_size {
                if self.drop_last {
                    out.pop();
                } else if last.len() < 2 && out.len() > 1 {
                    let tail = out.pop().unwrap();
                    out.last_mut().unwrap().extend(tail);
                }
            }
        }
        out
    }
}

pub fn make_batches(dataset: &Dataset, plan: &BatchPlan) -> Result<Vec<DataBatch>> {
    if plan.order.len() != dataset.n_samples() {
        return Err(Error::param(format!(
            "plan covers {} samples, dataset has {}",
            plan.order.len(),
            dataset.n_samples()
        )));
    }
    plan.chunks()
        .into_iter()
        .enumerate()
        .map(|(batch_id, idx)| {
            let sub = dataset.select(&idx);
            let batch = DataBatch {
                features: sub.features,
                labels: sub.labels,
                batch_id,
                indices: idx,
            };
            batch.validate()?;
            Ok(batch)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    /// Comma-separated text.
    Delimited,
    /// `SADM` little-endian binary.
    RawBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TextOptions {
    /// Each text line is one sample (otherwise each line is one feature row).
    pub samples_per_row: bool,
    /// Last feature row (or last field per line, with `samples_per_row`) holds labels.
    pub labels_last: bool,
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat, opts: TextOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let shown = path.display().to_string();
    let (features, labels) = match format {
        MatrixFormat::Delimited => {
            let text = fs::read_to_string(path)?;
            parse_delimited(&text, &shown, opts)?
        }
        MatrixFormat::RawBinary => {
            let mut buf = Vec::new();
            fs::File::open(path)?.read_to_end(&mut buf)?;
            decode_binary(&buf, &shown)?
        }
    };
    Dataset::new(features, labels, name, Provenance::File(shown))
}

fn ingest_err(path: &str, row: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_string(),
        row,
        col,
        msg: msg.into(),
    }
}

fn parse_delimited(text: &str, path: &str, opts: TextOptions) -> Result<(DMatrix<f64>, Option<Vec<usize>>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for (c, field) in line.split(',').enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| ingest_err(path, r, c, format!("cannot parse `{}`", field.trim())))?;
            if !v.is_finite() {
                return Err(ingest_err(path, r, c, "non-finite value"));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(ingest_err(
                    path,
                    r,
                    row.len().min(first.len()),
                    format!("expected {} fields, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ingest_err(path, 0, 0, "no data"));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    let mut mat = DMatrix::from_fn(nr, nc, |i, j| rows[i][j]);
    if opts.samples_per_row {
        mat = mat.transpose();
    }
    let labels = if opts.labels_last {
        if mat.nrows() < 2 {
            return Err(ingest_err(path, 0, 0, "label row leaves no features"));
        }
        let last = mat.nrows() - 1;
        let mut labels = Vec::with_capacity(mat.ncols());
        for (j, &v) in mat.row(last).iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 {
                let (r, c) = if opts.samples_per_row { (j, last) } else { (last, j) };
                return Err(ingest_err(
                    path,
                    r,
                    c,
                    format!("label {v} is not a non-negative integer"),
                ));
            }
            labels.push(v as usize);
        }
        mat = mat.remove_row(last);
        Some(labels)
    } else {
        None
    };
    Ok((mat, labels))
}

pub fn encode_binary(features: &DMatrix<f64>, labels: Option<&[usize]>) -> Vec<u8> {
    let (r, c) = features.shape();
    let mut out = Vec::with_capacity(25 + 8 * r * c + labels.map_or(0, |l| 4 * l.len()));
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(r as u64).to_le_bytes());
    out.extend_from_slice(&(c as u64).to_le_bytes());
    out.push(labels.is_some() as u8);
    for i in 0..r {
        for j in 0..c {
            out.extend_from_slice(&features[(i, j)].to_le_bytes());
        }
    }
    if let Some(l) = labels {
        for &v in l {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(buf: &[u8], path: &str) -> Result<(DMatrix<f64>, Option<Vec<usize>>)> {
    let header = 4 + 4 + 8 + 8 + 1;
    if buf.len() < header {
        return Err(ingest_err(path, 0, 0, "truncated header"));
    }
    if &buf[..4] != MATRIX_MAGIC {
        return Err(ingest_err(path, 0, 0, "bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(ingest_err(path, 0, 0, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let has_labels = match buf[24] {
        0 => false,
        1 => true,
        b => return Err(ingest_err(path, 0, 0, format!("bad label flag {b}"))),
    };
    if rows == 0 || cols == 0 {
        return Err(ingest_err(path, rows, cols, "empty matrix"));
    }
    let expected = header + 8 * rows * cols + if has_labels { 4 * cols } else { 0 };
    if buf.len() != expected {
        return Err(ingest_err(
            path,
            rows,
            cols,
            format!("expected {expected} bytes, found {}", buf.len()),
        ));
    }
    let mut mat = DMatrix::zeros(rows, cols);
    let mut off = header;
    for i in 0..rows {
        for j in 0..cols {
            let v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(ingest_err(path, i, j, "non-finite value"));
            }
            mat[(i, j)] = v;
            off += 8;
        }
    }
    let labels = has_labels.then(|| {
        (0..cols)
            .map(|j| {
                let o = off + 4 * j;
                u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize
            })
            .collect()
    });
    Ok((mat, labels))
}

pub fn save_matrix_binary(path: impl AsRef<Path>, features: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_binary(features, labels))?;
    Ok(())
}

/// Writes one feature row per line (samples in columns), labels as a final row.
pub fn save_matrix_delimited(path: impl AsRef<Path>, features: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<()> {
    let mut out = String::new();
    for row in features.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    if let Some(l) = labels {
        let fields: Vec<String> = l.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PCA

/// Principal component projection fitted on a column-sample matrix.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `d × n`; row `r` is the `r`-th principal direction.
    pub components: DMatrix<f64>,
    /// Variance of each component score (squared singular value over `N`).
    pub variances: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    pub fn fit(features: &DMatrix<f64>, dim: usize) -> Result<Self> {
        let (n, count) = features.shape();
        if dim == 0 || dim > n.min(count) {
            return Err(Error::param(format!(
                "PCA dimension {dim} outside [1, {}]",
                n.min(count)
            )));
        }
        let mean = features.column_mean();
        let mut centered = features.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let (dirs, sv) = linalg::left_singular(&centered)?;
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let mut components = DMatrix::zeros(dim, n);
        for r in 0..dim {
            let mut v = dirs.column(r).into_owned();
            linalg::fix_sign(v.as_mut_slice());
            components.row_mut(r).copy_from(&v.transpose());
        }
        let variances: Vec<f64> = sv[..dim].iter().map(|s| s * s / count as f64).collect();
        let explained_variance_ratio = sv[..dim]
            .iter()
            .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
            .collect();
        Ok(Self {
            mean,
            components,
            variances,
            explained_variance_ratio,
        })
    }

    pub fn transform(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.nrows() != self.mean.len() {
            return Err(Error::input(format!(
                "PCA fitted on {} features, got {}",
                self.mean.len(),
                features.nrows()
            )));
        }
        let mut centered = features.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(&self.components * centered)
    }

    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.components.transpose() * scores;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        out
    }
}

pub fn pca_reduce(dataset: &Dataset, dim: usize) -> Result<(Dataset, Pca)> {
    let pca = Pca::fit(&dataset.features, dim)?;
    let reduced = Dataset {
        features: pca.transform(&dataset.features)?,
        labels: dataset.labels.clone(),
        name: dataset.name.clone(),
        provenance: dataset.provenance.clone(),
    };
    Ok((reduced, pca))
}

// ---------------------------------------------------------------------------
// Splits

pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::param(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let n = dataset.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    match &dataset.labels {
        Some(labels) => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                by_class.entry(l).or_default().push(i);
            }
            for (class, mut idx) in by_class {
                if idx.len() < 2 {
                    return Err(Error::Split(format!(
                        "class {class} has {} point(s); a stratified split needs at least 2",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                let take = split_size(idx.len(), test_fraction);
                test.extend_from_slice(&idx[..take]);
                train.extend_from_slice(&idx[take..]);
            }
        }
        None => {
            if n < 2 {
                return Err(Error::Split(format!("cannot split {n} sample(s)")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let take = split_size(n, test_fraction);
            test.extend_from_slice(&idx[..take]);
            train.extend_from_slice(&idx[take..]);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.select(&train), dataset.select(&test)))
}

fn split_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSpec {
    pub n_ambient: usize,
    pub subspace_dim: usize,
    pub n_subspaces: usize,
    pub points_per: usize,
    pub noise_sigma: f64,
    /// Mutually orthogonal subspaces (disjoint blocks of one random rotation).
    pub independent: bool,
}

/// Points drawn uniformly from the unit sphere of each subspace, plus noise.
pub fn synth_union_of_subspaces(spec: &SubspaceSpec, seed: u64) -> Result<(Dataset, Vec<DMatrix<f64>>)> {
    let SubspaceSpec {
        n_ambient,
        subspace_dim,
        n_subspaces,
        points_per,
        noise_sigma,
        independent,
    } = *spec;
    if subspace_dim == 0 || n_subspaces == 0 || points_per == 0 {
        return Err(Error::param("subspace generator sizes must be positive"));
    }
    if subspace_dim > n_ambient {
        return Err(Error::param(format!(
            "subspace dimension {subspace_dim} exceeds ambient dimension {n_ambient}"
        )));
    }
    if independent && subspace_dim * n_subspaces > n_ambient {
        return Err(Error::param(format!(
            "{n_subspaces} independent subspaces of dimension {subspace_dim} do not fit in R^{n_ambient}"
        )));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::param("noise sigma must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<DMatrix<f64>> = if independent {
        let rot = random_orthonormal(n_ambient, n_ambient, &mut rng);
        (0..n_subspaces)
            .map(|s| rot.columns(s * subspace_dim, subspace_dim).into_owned())
            .collect()
    } else {
        (0..n_subspaces)
            .map(|_| random_orthonormal(n_ambient, subspace_dim, &mut rng))
            .collect()
    };
    let total = n_subspaces * points_per;
    let mut features = DMatrix::zeros(n_ambient, total);
    let mut labels = Vec::with_capacity(total);
    for (s, basis) in bases.iter().enumerate() {
        for p in 0..points_per {
            let mut coef = gaussian_vector(subspace_dim, &mut rng);
            let norm = coef.norm();
            if norm > 0.0 {
                coef /= norm;
            }
            let mut x = basis * coef;
            if noise_sigma > 0.0 {
                x += gaussian_vector(n_ambient, &mut rng) * noise_sigma;
            }
            features.set_column(s * points_per + p, &x);
            labels.push(s);
        }
    }
    let name = format!("subspaces-{n_subspaces}x{subspace_dim}-in-{n_ambient}");
    let ds = Dataset::new(features, Some(labels), name.clone(), Provenance::Synthetic(name))?;
    Ok((ds, bases))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_ambient: usize,
    pub n_clusters: usize,
    pub points_per: usize,
    pub center_sep: f64,
    pub noise_sigma: f64,
}

/// Isotropic Gaussian clusters whose centers are pairwise at least `center_sep` apart.
pub fn synth_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    let BlobSpec {
        n_ambient,
        n_clusters,
        points_per,
        center_sep,
        noise_sigma,
    } = *spec;
    if !(center_sep > 0.0) || !center_sep.is_finite() {
        return Err(Error::param(format!(
            "center separation must be positive, got {center_sep}"
        )));
    }
    if n_ambient == 0 || n_clusters == 0 || points_per == 0 {
        return Err(Error::param("blob generator sizes must be positive"));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::param("noise sigma must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(n_ambient, n_clusters, center_sep, &mut rng)?;
    let total = n_clusters * points_per;
    let mut features = DMatrix::zeros(n_ambient, total);
    let mut labels = Vec::with_capacity(total);
    for (c, center) in centers.iter().enumerate() {
        for p in 0..points_per {
            let mut x = center.clone();
            if noise_sigma > 0.0 {
                x += gaussian_vector(n_ambient, &mut rng) * noise_sigma;
            }
            features.set_column(c * points_per + p, &x);
            labels.push(c);
        }
    }
    let name = format!("blobs-{n_clusters}x{points_per}-in-{n_ambient}");
    Dataset::new(features, Some(labels), name.clone(), Provenance::Synthetic(name))
}

fn blob_centers(n: usize, count: usize, sep: f64, rng: &mut ChaCha8Rng) -> Result<Vec<DVector<f64>>> {
    if count <= n {
        // Scaled vertices of a rotated simplex: every pair exactly `sep` apart.
        let rot = random_orthonormal(n, n, rng);
        let scale = sep / std::f64::consts::SQRT_2;
        return Ok((0..count).map(|c| rot.column(c) * scale).collect());
    }
    // More clusters than dimensions: rejection-sample inside a ball sized
    // to give the packing some room.
    let radius = sep * (count as f64).powf(1.0 / n as f64) * 2.0;
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while centers.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::param(format!(
                "could not place {count} centers {sep} apart in R^{n}"
            )));
        }
        let cand = gaussian_vector(n, rng).normalize() * radius;
        if centers.iter().all(|c| (c - &cand).norm() >= sep) {
            centers.push(cand);
        }
    }
    Ok(centers)
}

fn gaussian_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `rows × cols` matrix with orthonormal columns (Gaussian + QR).
pub(crate) fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    // Fix QR's sign freedom so the result depends only on the draw.
    let mut q = q.columns(0, cols).into_owned();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
