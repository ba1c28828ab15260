//! Composite losses on the latent codes `Z` (`k × m`) and reconstructions.
//!
//! * reconstruction `Σᵢ ‖xᵢ − x̂ᵢ‖₂` (unsquared)
//! * spectral `λ₁ Σᵢ ‖zᵢ − uᵢ‖₁ + λ₂ Σᵢ ‖zᵢ − uᵢ‖₂` (unsquared), `uᵢ` a target column
//! * orthogonality `λ₃ Σᵢ ‖Zᵀzᵢ − eᵢ‖² = λ₃ ‖ZᵀZ − I‖_F²`
//! * structure `λ₄ Σᵢ ‖zᵢ − Z sᵢ‖²`, `sᵢ` a column of the self-expression matrix
//!
//! Zero residuals of the unsquared norms take subgradient 0.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Reconstruction + spectral.
    LrLs,
    /// Adds orthogonality.
    Lo,
    /// Adds structure preservation.
    Lh,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::LrLs, LossVariant::Lo, LossVariant::Lh];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::LrLs => "lr_ls",
            LossVariant::Lo => "lo",
            LossVariant::Lh => "lh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr_ls" | "lrls" => Some(LossVariant::LrLs),
            "lo" => Some(LossVariant::Lo),
            "lh" => Some(LossVariant::Lh),
            _ => None,
        }
    }

    fn uses_orthogonality(self) -> bool {
        matches!(self, LossVariant::Lo | LossVariant::Lh)
    }

    fn uses_structure(self) -> bool {
        matches!(self, LossVariant::Lh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.002,
            lambda2: 0.02,
            lambda3: 0.002,
            lambda4: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::config(format!("loss weights must be non-negative, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub spectral_l1: f64,
    pub spectral_l2: f64,
    pub orthogonality: f64,
    pub structure: f64,
    pub total: f64,
}

/// Column-compressed self-expression matrix: `columns[i]` lists the
/// `(row, value)` non-zeros of column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    size: usize,
    columns: Vec<Vec<(usize, f64)>>,
}

impl StructureMatrix {
    pub fn from_dense(s: &DMatrix<f64>) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::input(format!(
                "self-expression matrix must be square, got {:?}",
                s.shape()
            )));
        }
        let columns = s
            .column_iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(r, &v)| (r, v))
                    .collect()
            })
            .collect();
        Ok(Self {
            size: s.nrows(),
            columns,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn column(&self, i: usize) -> &[(usize, f64)] {
        &self.columns[i]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.size, self.size);
        for (i, col) in self.columns.iter().enumerate() {
            for &(r, v) in col {
                d[(r, i)] = v;
            }
        }
        d
    }

    /// `E = Z − Z S`.
    fn residual(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut e = z.clone();
        for (i, col) in self.columns.iter().enumerate() {
            for &(j, v) in col {
                let zj = z.column(j).into_owned();
                e.column_mut(i).axpy(-v, &zj, 1.0);
            }
        }
        e
    }
}

/// Everything the losses see for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// Encoder output `k × m`.
    pub latent: &'a DMatrix<f64>,
    /// Decoder output `n × m`.
    pub reconstruction: &'a DMatrix<f64>,
    /// Batch data `n × m`.
    pub data: &'a DMatrix<f64>,
    /// Spectral targets `k × m`.
    pub targets: &'a DMatrix<f64>,
    pub structure: Option<&'a StructureMatrix>,
    pub weights: LossWeights,
    pub variant: LossVariant,
}

/// Gradients of the total loss with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub latent: DMatrix<f64>,
    pub reconstruction: DMatrix<f64>,
}

impl LossInputs<'_> {
    fn validate(&self) -> Result<()> {
        let (k, m) = self.latent.shape();
        if self.targets.shape() != (k, m) {
            return Err(Error::input(format!(
                "latent {:?} and targets {:?} differ in shape",
                self.latent.shape(),
                self.targets.shape()
            )));
        }
        if self.reconstruction.shape() != self.data.shape() || self.data.ncols() != m {
            return Err(Error::input("reconstruction, data and latent widths disagree"));
        }
        self.weights.validate()?;
        if self.variant.uses_structure() {
            match self.structure {
                None => {
                    return Err(Error::config("structure loss requires a self-expression matrix"));
                }
                Some(s) if s.size() != m => {
                    return Err(Error::input(format!(
                        "self-expression matrix is {}×{0}, batch has {m} points",
                        s.size()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn column_norms_and_units(r: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let mut total = 0.0;
    let mut units = DMatrix::zeros(r.nrows(), r.ncols());
    for (j, col) in r.column_iter().enumerate() {
        let n = col.norm();
        total += n;
        if n > 0.0 {
            units.set_column(j, &(col / n));
        }
    }
    (total, units)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss_terms(inputs: &LossInputs) -> Result<LossBreakdown> {
    Ok(evaluate(inputs, false)?.0)
}

/// Loss value and its gradient with respect to latent codes and reconstructions.
pub fn loss_and_output_grads(inputs: &LossInputs) -> Result<(LossBreakdown, OutputGrads)> {
    let (b, g) = evaluate(inputs, true)?;
    Ok((b, g.expect("gradients requested")))
}

fn evaluate(inp: &LossInputs, with_grads: bool) -> Result<(LossBreakdown, Option<OutputGrads>)> {
    inp.validate()?;
    let w = inp.weights;
    let z = inp.latent;

    let (reconstruction, recon_units) = column_norms_and_units(&(inp.data - inp.reconstruction));
    let spec_res = z - inp.targets;
    let spectral_l1: f64 = spec_res.iter().map(|v| v.abs()).sum();
    let (spectral_l2, spec_units) = column_norms_and_units(&spec_res);

    let mut b = LossBreakdown {
        reconstruction,
        spectral_l1,
        spectral_l2,
        ..Default::default()
    };

    let mut grad_z = with_grads.then(|| spec_res.map(sign) * w.lambda1 + &spec_units * w.lambda2);

    if inp.variant.uses_orthogonality() {
        // ‖ZᵀZ − I‖² = ‖ZZᵀ‖² − 2‖Z‖² + m, evaluated through the k×k Gram.
        let gram = z * z.transpose();
        let m = z.ncols() as f64;
        b.orthogonality = (gram.norm_squared() - 2.0 * z.norm_squared() + m).max(0.0);
        if let Some(g) = grad_z.as_mut() {
            // ∇ = 4 Z (ZᵀZ − I) = 4 (ZZᵀ Z − Z)
            *g += (&gram * z - z) * (4.0 * w.lambda3);
        }
    }

    if inp.variant.uses_structure() {
        let s = inp.structure.expect("validated");
        let e = s.residual(z);
        b.structure = e.norm_squared();
        if let Some(g) = grad_z.as_mut() {
            // ∇ = 2E − 2E Sᵀ
            let scale = 2.0 * w.lambda4;
            *g += &e * scale;
            for i in 0..s.size() {
                for &(j, v) in s.column(i) {
                    let ei = e.column(i).into_owned();
                    g.column_mut(j).axpy(-scale * v, &ei, 1.0);
                }
            }
        }
    }

    b.total = b.reconstruction
        + w.lambda1 * b.spectral_l1
        + w.lambda2 * b.spectral_l2
        + w.lambda3 * b.orthogonality
        + w.lambda4 * b.structure;

    let grads = grad_z.map(|latent| OutputGrads {
        latent,
        reconstruction: -recon_units,
    });
    Ok((b, grads))
}

/// Reconstruction-only loss `Σᵢ ‖xᵢ − x̂ᵢ‖₂` and its gradient in `x̂`.
pub fn reconstruction_loss(data: &DMatrix<f64>, reconstruction: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if data.shape() != reconstruction.shape() {
        return Err(Error::input("reconstruction shape differs from data"));
    }
    let (total, units) = column_norms_and_units(&(data - reconstruction));
    Ok((total, -units))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn inputs<'a>(
        z: &'a DMatrix<f64>,
        xh: &'a DMatrix<f64>,
        x: &'a DMatrix<f64>,
        u: &'a DMatrix<f64>,
        s: Option<&'a StructureMatrix>,
        variant: LossVariant,
    ) -> LossInputs<'a> {
        LossInputs {
            latent: z,
            reconstruction: xh,
            data: x,
            targets: u,
            structure: s,
            weights: LossWeights::default(),
            variant,
        }
    }

    #[test]
    fn perfect_fit_is_zero_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(4, 3, &mut rng);
        let u = rand_mat(2, 3, &mut rng);
        let (b, g) = loss_and_output_grads(&inputs(&u, &x, &x, &u, None, LossVariant::LrLs)).unwrap();
        assert_eq!(
            (b.reconstruction, b.spectral_l1, b.spectral_l2, b.total),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert!(g.latent.iter().chain(g.reconstruction.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn orthonormal_columns_have_zero_orthogonality() {
        let (c, s) = (0.6, 0.8);
        let z = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let x = DMatrix::zeros(3, 2);
        let b = loss_terms(&inputs(&z, &x, &x, &z, None, LossVariant::Lo)).unwrap();
        assert!(b.orthogonality.abs() < 1e-15);
    }

    #[test]
    fn terms_match_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (k, m, n) = (2, 3, 4);
        let z = rand_mat(k, m, &mut rng);
        let u = rand_mat(k, m, &mut rng);
        let x = rand_mat(n, m, &mut rng);
        let xh = rand_mat(n, m, &mut rng);
        let sd = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 1., 1., 0.]);
        let s = StructureMatrix::from_dense(&sd).unwrap();
        let b = loss_terms(&inputs(&z, &xh, &x, &u, Some(&s), LossVariant::Lh)).unwrap();

        let (mut rec, mut l1, mut l2, mut orth, mut st) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..m {
            let mut sq = 0.0;
            for r in 0..n {
                sq += (x[(r, i)] - xh[(r, i)]).powi(2);
            }
            rec += sq.sqrt();
            let mut sq = 0.0;
            for r in 0..k {
                let d = z[(r, i)] - u[(r, i)];
                l1 += d.abs();
                sq += d * d;
            }
            l2 += sq.sqrt();
            for j in 0..m {
                let mut dot = 0.0;
                for r in 0..k {
                    dot += z[(r, j)] * z[(r, i)];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                orth += (dot - target).powi(2);
            }
            for r in 0..k {
                let mut comb = 0.0;
                for j in 0..m {
                    comb += z[(r, j)] * sd[(j, i)];
                }
                st += (z[(r, i)] - comb).powi(2);
            }
        }
        assert!((b.reconstruction - rec).abs() < 1e-12);
        assert!((b.spectral_l1 - l1).abs() < 1e-12);
        assert!((b.spectral_l2 - l2).abs() < 1e-12);
        assert!((b.orthogonality - orth).abs() < 1e-12);
        assert!((b.structure - st).abs() < 1e-12);
        let w = LossWeights::default();
        let total = rec + w.lambda1 * l1 + w.lambda2 * l2 + w.lambda3 * orth + w.lambda4 * st;
        assert!((b.total - total).abs() < 1e-12);
    }

    #[test]
    fn inactive_terms_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_mat(2, 4, &mut rng);
        let u = rand_mat(2, 4, &mut rng);
        let x = rand_mat(3, 4, &mut rng);
        let b = loss_terms(&inputs(&z, &x, &x, &u, None, LossVariant::LrLs)).unwrap();
        assert_eq!((b.orthogonality, b.structure), (0.0, 0.0));
        let b = loss_terms(&inputs(&z, &x, &x, &u, None, LossVariant::Lo)).unwrap();
        assert!(b.orthogonality > 0.0);
        assert_eq!(b.structure, 0.0);
    }

    #[test]
    fn structure_variant_requires_matrix() {
        let z = DMatrix::zeros(2, 3);
        let x = DMatrix::zeros(2, 3);
        let r = loss_terms(&inputs(&z, &x, &x, &z, None, LossVariant::Lh));
        assert!(matches!(r, Err(Error::InvalidConfiguration(_))));
    }

    #[test]
    fn structure_gradient_is_linear_in_lambda4() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_mat(2, 4, &mut rng);
        let u = rand_mat(2, 4, &mut rng);
        let x = rand_mat(3, 4, &mut rng);
        let s = StructureMatrix::from_dense(&DMatrix::from_fn(4, 4, |i, j| ((i + 1) % 4 == j) as u8 as f64)).unwrap();
        let grad = |l4: f64| {
            let mut inp = inputs(&z, &x, &x, &u, Some(&s), LossVariant::Lh);
            inp.weights.lambda4 = l4;
            loss_and_output_grads(&inp).unwrap().1.latent
        };
        let base = grad(0.0);
        let one = &grad(0.5) - &base;
        let two = &grad(1.0) - &base;
        assert!((two - one * 2.0).amax() < 1e-12);
    }

    #[test]
    fn structure_matrix_round_trips_dense() {
        let d = DMatrix::from_row_slice(3, 3, &[0., 0.5, 0., 1., 0., 0., 0., 2., 0.]);
        assert_eq!(StructureMatrix::from_dense(&d).unwrap().to_dense(), d);
    }
}
