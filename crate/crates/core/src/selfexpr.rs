//! Self-expressive coefficient matrices.
//!
//! Two routes produce a per-batch matrix whose column `i` expresses `x_i` as a
//! combination of the other batch points:
//!
//! * **attention**: query and key networks map points to `t`-dimensional
//!   codes, `H(i,j) = Q(x_i)·K(x_j)`, trained on an elastic-net
//!   self-expression objective; the `neighbors_k` largest-magnitude
//!   coefficients of each point are kept as a binary matrix.
//! * **lasso**: `min ‖x_i − X_i c‖² + λ‖c‖₁` with `c_i = 0`, solved per column
//!   by proximal gradient.
//!
//! `X_i` is the batch matrix with column `i` zeroed.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataBatch;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Activation, Mlp, MlpGrads, OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNets {
    pub query: Mlp,
    pub key: Mlp,
}

impl AttentionNets {
    /// Query and key networks with identical widths `input → hidden… → embed_dim`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = Mlp::new(&sizes, activation, Activation::Linear, &mut rng)?;
        let key = Mlp::new(&sizes, activation, Activation::Linear, &mut rng)?;
        Self::from_parts(query, key)
    }

    pub fn from_parts(query: Mlp, key: Mlp) -> Result<Self> {
        if query.sizes() != key.sizes() {
            return Err(Error::config(format!(
                "query {:?} and key {:?} networks differ in shape",
                query.sizes(),
                key.sizes()
            )));
        }
        Ok(Self { query, key })
    }

    pub fn embed_dim(&self) -> usize {
        self.query.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.query.input_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    pub gamma: f64,
    pub beta: f64,
    /// Square the ℓ₂ regularizer (standard elastic net) instead of using the plain norm.
    #[serde(default)]
    pub squared_l2: bool,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            gamma: 200.0,
            beta: 0.9,
            squared_l2: false,
        }
    }
}

impl ElasticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::param(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfExprPair {
    /// Raw attention scores `H`, `H(i,j) = Q(x_i)·K(x_j)`.
    pub dense: DMatrix<f64>,
    /// Column `i` marks the `neighbors_k` strongest coefficients of `x_i`.
    pub sparse_binary: DMatrix<f64>,
    pub neighbors_k: usize,
}

pub fn attention_scores(nets: &AttentionNets, batch: &DataBatch) -> Result<DMatrix<f64>> {
    scores_from_features(nets, &batch.features)
}

fn scores_from_features(nets: &AttentionNets, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != nets.input_dim() {
        return Err(Error::input(format!(
            "attention networks expect {} features, batch has {}",
            nets.input_dim(),
            x.nrows()
        )));
    }
    let q = nets.query.predict(x)?;
    let k = nets.key.predict(x)?;
    Ok(q.transpose() * k)
}

/// Coefficient matrix with column `i` holding the coefficients of `x_i`,
/// i.e. row `i` of the score matrix.
pub fn coefficient_matrix(scores: &DMatrix<f64>) -> DMatrix<f64> {
    scores.transpose()
}

fn l2_term(c: &[f64], squared: bool) -> f64 {
    let sq: f64 = c.iter().map(|v| v * v).sum();
    if squared {
        sq
    } else {
        sq.sqrt()
    }
}

/// `γ‖x_i − X_i c‖² + β‖c‖₁ + (1−β)‖c‖₂` for one column.
pub fn selfexpr_objective(
    batch: &DataBatch,
    column_index: usize,
    coefficients: &[f64],
    cfg: &ElasticConfig,
) -> Result<f64> {
    let x = &batch.features;
    let m = x.ncols();
    if column_index >= m {
        return Err(Error::input(format!(
            "column {column_index} out of range for {m} points"
        )));
    }
    if coefficients.len() != m {
        return Err(Error::input(format!(
            "{} coefficients for {m} points",
            coefficients.len()
        )));
    }
    cfg.validate()?;
    let mut r = x.column(column_index).into_owned();
    for (j, &c) in coefficients.iter().enumerate() {
        if j != column_index && c != 0.0 {
            r.axpy(-c, &x.column(j), 1.0);
        }
    }
    let l1: f64 = coefficients.iter().map(|v| v.abs()).sum();
    Ok(cfg.gamma * r.norm_squared() + cfg.beta * l1 + (1.0 - cfg.beta) * l2_term(coefficients, cfg.squared_l2))
}

/// Sum of the per-column objective over a full coefficient matrix, and its
/// gradient with respect to that matrix.
pub fn batch_objective(x: &DMatrix<f64>, coef: &DMatrix<f64>, cfg: &ElasticConfig) -> (f64, DMatrix<f64>) {
    let m = x.ncols();
    // R = X − X_i-reconstruction, column by column: x_i − Σ_{j≠i} c_ji x_j
    let mut r = x - x * coef;
    for i in 0..m {
        let cii = coef[(i, i)];
        if cii != 0.0 {
            r.column_mut(i).axpy(cii, &x.column(i), 1.0);
        }
    }
    let mut grad = x.transpose() * &r * (-2.0 * cfg.gamma);
    for i in 0..m {
        grad[(i, i)] = 0.0;
    }
    let mut value = cfg.gamma * r.norm_squared();
    for (i, col) in coef.column_iter().enumerate() {
        let l1: f64 = col.iter().map(|v| v.abs()).sum();
        let norm = col.norm();
        value += cfg.beta * l1;
        let mut g = grad.column_mut(i);
        for (gj, &cj) in g.iter_mut().zip(col.iter()) {
            if cj > 0.0 {
                *gj += cfg.beta;
            } else if cj < 0.0 {
                *gj -= cfg.beta;
            }
        }
        if cfg.squared_l2 {
            value += (1.0 - cfg.beta) * norm * norm;
            g.axpy(2.0 * (1.0 - cfg.beta), &col, 1.0);
        } else {
            value += (1.0 - cfg.beta) * norm;
            if norm > 0.0 {
                g.axpy((1.0 - cfg.beta) / norm, &col, 1.0);
            }
        }
    }
    (value, grad)
}

/// Objective summed over every column of the batch, with gradients for the
/// query and key networks.
pub fn attention_objective_and_grads(
    nets: &AttentionNets,
    x: &DMatrix<f64>,
    cfg: &ElasticConfig,
) -> Result<(f64, MlpGrads, MlpGrads)> {
    if x.nrows() != nets.input_dim() {
        return Err(Error::input("attention networks and batch disagree on feature count"));
    }
    let qp = nets.query.forward(x)?;
    let kp = nets.key.forward(x)?;
    let coef = kp.output.transpose() * &qp.output; // (Qᵀ K)ᵀ
    let (value, g_coef) = batch_objective(x, &coef, cfg);
    // H = QᵀK, G_H = G_Cᵀ: ∂/∂Q = K G_C, ∂/∂K = Q G_Cᵀ
    let gq = &kp.output * &g_coef;
    let gk = &qp.output * g_coef.transpose();
    let (q_grads, _) = nets.query.backward(&qp, &gq);
    let (k_grads, _) = nets.key.backward(&kp, &gk);
    Ok((value, q_grads, k_grads))
}

pub fn attention_objective(nets: &AttentionNets, x: &DMatrix<f64>, cfg: &ElasticConfig) -> Result<f64> {
    let coef = coefficient_matrix(&scores_from_features(nets, x)?);
    Ok(batch_objective(x, &coef, cfg).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionTraining {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

/// Batch-by-batch Adam descent on the summed objective. Returns the trained
/// networks and the per-epoch objective (summed over batches, before each step).
pub fn train_attention(
    nets: &AttentionNets,
    batches: &[DataBatch],
    cfg: &ElasticConfig,
    opts: &AttentionTraining,
) -> Result<(AttentionNets, Vec<f64>)> {
    cfg.validate()?;
    opts.optimizer.validate()?;
    let mut nets = nets.clone();
    let mut q_opt = OptimizerState::new(opts.optimizer);
    let mut k_opt = OptimizerState::new(opts.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &b in &order {
            let (value, gq, gk) = attention_objective_and_grads(&nets, &batches[b].features, cfg)?;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch, last_finite });
            }
            total += value;
            q_opt.step(&mut nets.query.tensors_mut(), &gq.tensors())?;
            k_opt.step(&mut nets.key.tensors_mut(), &gk.tensors())?;
        }
        if !(nets.query.is_finite() && nets.key.is_finite()) {
            return Err(Error::TrainingDiverged { epoch, last_finite });
        }
        last_finite = total;
        log::debug!("attention epoch {epoch}: objective {total:.6}");
        history.push(total);
    }
    Ok((nets, history))
}

/// Keeps, per column, the `neighbors_k` off-diagonal entries of largest
/// magnitude as ones (lower row index wins ties).
pub fn knn_sparsify(dense: &DMatrix<f64>, neighbors_k: usize) -> Result<DMatrix<f64>> {
    if !dense.is_square() {
        return Err(Error::input(format!(
            "coefficient matrix must be square, got {:?}",
            dense.shape()
        )));
    }
    let m = dense.nrows();
    if neighbors_k == 0 || neighbors_k + 1 > m {
        return Err(Error::param(format!(
            "neighbors_k must lie in [1, {}], got {neighbors_k}",
            m.saturating_sub(1)
        )));
    }
    let mut out = DMatrix::zeros(m, m);
    let mut cand: Vec<usize> = Vec::with_capacity(m - 1);
    for i in 0..m {
        cand.clear();
        cand.extend((0..m).filter(|&j| j != i));
        cand.sort_by(|&a, &b| dense[(b, i)].abs().total_cmp(&dense[(a, i)].abs()).then(a.cmp(&b)));
        for &j in &cand[..neighbors_k] {
            out[(j, i)] = 1.0;
        }
    }
    Ok(out)
}

/// Attention scores for a batch and their sparse binary neighbour matrix.
pub fn self_expression(nets: &AttentionNets, batch: &DataBatch, neighbors_k: usize) -> Result<SelfExprPair> {
    let dense = attention_scores(nets, batch)?;
    let sparse_binary = knn_sparsify(&coefficient_matrix(&dense), neighbors_k)?;
    Ok(SelfExprPair {
        dense,
        sparse_binary,
        neighbors_k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoResult {
    /// Column `i` holds the coefficients of `x_i`; the diagonal is zero.
    pub coefficients: DMatrix<f64>,
    /// Every column met the tolerance within `max_iter`.
    pub converged: bool,
    pub iterations: Vec<usize>,
}

/// `‖x_i − X_i c‖² + λ‖c‖₁` (the `c_i` entry is ignored by the fit term).
pub fn lasso_objective(x: &DMatrix<f64>, column_index: usize, c: &DVector<f64>, lambda: f64) -> f64 {
    let mut r = x.column(column_index).into_owned();
    for j in 0..x.ncols() {
        if j != column_index && c[j] != 0.0 {
            r.axpy(-c[j], &x.column(j), 1.0);
        }
    }
    r.norm_squared() + lambda * c.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Proximal-gradient (ISTA) solve for one column. Returns the best iterate,
/// whether the relative objective change met `tol`, and the iteration count.
/// `trace`, when given, receives the objective after every iteration.
pub fn lasso_column(
    x: &DMatrix<f64>,
    column_index: usize,
    lambda: f64,
    max_iter: usize,
    tol: f64,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<(DVector<f64>, bool, usize)> {
    let m = x.ncols();
    let mut xi = x.clone();
    xi.column_mut(column_index).fill(0.0);
    // Half-scaled problem ½‖x − X_i c‖² + (λ/2)‖c‖₁ has gradient Lipschitz constant σ_max(X_i)².
    let lip = linalg::spectral_norm_sq(&xi)?;
    let mut c = DVector::zeros(m);
    if lip == 0.0 {
        return Ok((c, true, 0));
    }
    let step = 1.0 / lip;
    let thresh = 0.5 * lambda * step;
    let target = x.column(column_index).into_owned();
    let gram = xi.transpose() * &xi;
    let xty = xi.transpose() * &target;
    let mut obj = lasso_objective(x, column_index, &c, lambda);
    let mut best = (obj, c.clone());
    for it in 1..=max_iter {
        // gradient of the half-scaled fit term: XᵢᵀXᵢ c − Xᵢᵀ x
        let grad = &gram * &c - &xty;
        for j in 0..m {
            c[j] = if j == column_index {
                0.0
            } else {
                soft_threshold(c[j] - step * grad[j], thresh)
            };
        }
        let next = lasso_objective(x, column_index, &c, lambda);
        if let Some(t) = trace.as_deref_mut() {
            t.push(next);
        }
        if next < best.0 {
            best = (next, c.clone());
        }
        let change = (obj - next).abs();
        obj = next;
        if change <= tol * obj.abs().max(f64::MIN_POSITIVE) {
            return Ok((best.1, true, it));
        }
    }
    Ok((best.1, false, max_iter))
}

pub fn lasso_selfexpr(batch: &DataBatch, lambda: f64, max_iter: usize, tol: f64) -> Result<LassoResult> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("lasso lambda must be positive, got {lambda}")));
    }
    let x = &batch.features;
    let m = x.ncols();
    let mut coefficients = DMatrix::zeros(m, m);
    let mut converged = true;
    let mut iterations = Vec::with_capacity(m);
    for i in 0..m {
        let (c, ok, it) = lasso_column(x, i, lambda, max_iter, tol, None)?;
        coefficients.set_column(i, &c);
        converged &= ok;
        iterations.push(it);
    }
    if !converged {
        log::warn!("lasso did not converge on every column within {max_iter} iterations");
    }
    Ok(LassoResult {
        coefficients,
        converged,
        iterations,
    })
}
