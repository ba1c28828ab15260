//! Independent oracles and instance generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadse::data::DataBatch;
use sadse::nn::{Autoencoder, LossVariant, LossWeights, StructureMatrix};
use sadse::selfexpr::{AttentionNets, ElasticConfig};
use sadse::spectral::SpectralTarget;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn batch(x: DMatrix<f64>) -> DataBatch {
    DataBatch::new(x, None, 0).unwrap()
}

// ---------------------------------------------------------------------------
// Finite differences

/// Largest per-coordinate relative error between a central difference and an
/// analytic gradient. Coordinates whose gradient is tiny are measured against
/// `1e-3 · max|g|` so round-off in the difference quotient does not dominate.
pub fn max_relative_error(fd: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(fd.len(), analytic.len());
    let scale = analytic.iter().chain(fd).fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    fd.iter()
        .zip(analytic)
        .map(|(f, a)| (f - a).abs() / f.abs().max(a.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` over every coordinate exposed by `params`.
pub fn central_differences<M: Clone>(
    model: &M,
    params: impl Fn(&mut M) -> Vec<&mut [f64]>,
    f: impl Fn(&M) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let sizes: Vec<usize> = params(&mut probe).iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = params(&mut probe)[t][i];
            params(&mut probe)[t][i] = orig + h;
            let up = f(&probe);
            params(&mut probe)[t][i] = orig - h;
            let down = f(&probe);
            params(&mut probe)[t][i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn ae_params(ae: &mut Autoencoder) -> Vec<&mut [f64]> {
    let mut t = ae.encoder.tensors_mut();
    t.extend(ae.decoder.tensors_mut());
    t
}

pub fn attention_params(nets: &mut AttentionNets) -> Vec<&mut [f64]> {
    let mut t = nets.query.tensors_mut();
    t.extend(nets.key.tensors_mut());
    t
}

/// A small autoencoder problem with spectral targets and a binary structure
/// matrix, resampled until no unsquared-norm kink lies near the start point.
pub struct LossInstance {
    pub ae: Autoencoder,
    pub x: DMatrix<f64>,
    pub targets: SpectralTarget,
    pub structure: StructureMatrix,
}

pub fn loss_instance(seed: u64) -> LossInstance {
    let mut r = rng(seed);
    for attempt in 0.. {
        let n = r.gen_range(3..=6);
        let k = r.gen_range(2..=3);
        let m = r.gen_range(k + 2..=8);
        let hidden = r.gen_range(2..=5);
        let ae = Autoencoder::new(&[n, hidden, k], seed.wrapping_mul(31).wrapping_add(attempt)).unwrap();
        let x = uniform(n, m, &mut r);
        let targets = SpectralTarget {
            vectors: uniform(k, m, &mut r),
            eigenvalues: vec![1.0; k],
            zero_modes_skipped: 1,
        };
        let mut s = DMatrix::zeros(m, m);
        for i in 0..m {
            for _ in 0..2 {
                let j = (i + r.gen_range(1..m)) % m;
                s[(j, i)] = 1.0;
            }
        }
        let structure = StructureMatrix::from_dense(&s).unwrap();
        let z = ae.encoder.predict(&x).unwrap();
        let recon = ae.decoder.predict(&z).unwrap();
        let spec_gap = (&z - &targets.vectors)
            .iter()
            .fold(f64::INFINITY, |a, v| a.min(v.abs()));
        let col_gap = (&x - &recon).column_iter().fold(f64::INFINITY, |a, c| a.min(c.norm()));
        if spec_gap > 1e-3 && col_gap > 1e-3 {
            return LossInstance {
                ae,
                x,
                targets,
                structure,
            };
        }
    }
    unreachable!()
}

/// Weights large enough that every term contributes visibly to the gradient.
pub fn probe_weights() -> LossWeights {
    LossWeights {
        lambda1: 0.3,
        lambda2: 0.7,
        lambda3: 0.2,
        lambda4: 0.5,
    }
}

pub fn loss_value(inst: &LossInstance, ae: &Autoencoder, w: LossWeights, v: LossVariant) -> f64 {
    sadse::nn::loss_gradients(
        ae,
        &inst.x,
        sadse::nn::BatchSupervision {
            targets: &inst.targets,
            structure: Some(&inst.structure),
        },
        w,
        v,
    )
    .unwrap()
    .breakdown
    .total
}

/// Worst coordinate error of the autoencoder gradient for one variant.
pub fn loss_gradient_error(inst: &LossInstance, w: LossWeights, v: LossVariant) -> f64 {
    let g = sadse::nn::loss_gradients(
        &inst.ae,
        &inst.x,
        sadse::nn::BatchSupervision {
            targets: &inst.targets,
            structure: Some(&inst.structure),
        },
        w,
        v,
    )
    .unwrap();
    let analytic: Vec<f64> = g
        .encoder
        .tensors()
        .into_iter()
        .chain(g.decoder.tensors())
        .flat_map(|t| t.iter().copied())
        .collect();
    let fd = central_differences(&inst.ae, ae_params, |ae| loss_value(inst, ae, w, v), 1e-5);
    max_relative_error(&fd, &analytic)
}

/// Tanh attention nets on a small batch, resampled until every coefficient
/// sits away from the ℓ₁ kink at zero.
pub fn attention_instance(seed: u64) -> (AttentionNets, DMatrix<f64>, ElasticConfig) {
    let mut r = rng(seed ^ 0xa77e);
    for attempt in 0.. {
        let n = r.gen_range(3..=6);
        let m = r.gen_range(3..=8);
        let nets = AttentionNets::new(
            n,
            &[r.gen_range(2..=4)],
            r.gen_range(2..=3),
            sadse::nn::Activation::Tanh,
            seed.wrapping_mul(17).wrapping_add(attempt),
        )
        .unwrap();
        let x = uniform(n, m, &mut r);
        let q = nets.query.predict(&x).unwrap();
        let k = nets.key.predict(&x).unwrap();
        let h = q.transpose() * k;
        if h.iter().all(|v| v.abs() > 1e-3) {
            let cfg = ElasticConfig {
                gamma: r.gen_range(0.5..5.0),
                beta: r.gen_range(0.1..0.9),
                squared_l2: false,
            };
            return (nets, x, cfg);
        }
    }
    unreachable!()
}

pub fn attention_gradient_error(nets: &AttentionNets, x: &DMatrix<f64>, cfg: &ElasticConfig) -> f64 {
    let (_, gq, gk) = sadse::selfexpr::attention_objective_and_grads(nets, x, cfg).unwrap();
    let analytic: Vec<f64> = gq
        .tensors()
        .into_iter()
        .chain(gk.tensors())
        .flat_map(|t| t.iter().copied())
        .collect();
    let fd = central_differences(
        nets,
        attention_params,
        |n| sadse::selfexpr::attention_objective(n, x, cfg).unwrap(),
        1e-5,
    );
    max_relative_error(&fd, &analytic)
}

// ---------------------------------------------------------------------------
// Eigen oracle

/// The `count` smallest eigenvalues of a symmetric positive semidefinite
/// matrix by power iteration on `c·I − L` with explicit deflation, where `c`
/// is a Gershgorin bound on the spectrum.
pub fn smallest_eigenvalues(l: &DMatrix<f64>, count: usize, seed: u64) -> Vec<f64> {
    let m = l.nrows();
    let c = (0..m)
        .map(|i| l.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let shifted = DMatrix::identity(m, m) * c - l;
    let mut r = rng(seed);
    let mut found: Vec<DVector<f64>> = Vec::new();
    let mut values = Vec::new();
    for _ in 0..count {
        let mut v = DVector::from_fn(m, |_, _| r.gen_range(-1.0..1.0));
        let mut rq = f64::NAN;
        for it in 0..500_000 {
            for u in &found {
                let d = u.dot(&v);
                v.axpy(-d, u, 1.0);
            }
            v /= v.norm();
            let w = &shifted * &v;
            let next = v.dot(&w);
            v = w;
            if it > 10 && (next - rq).abs() <= 1e-15 * c {
                rq = next;
                break;
            }
            rq = next;
        }
        for u in &found {
            let d = u.dot(&v);
            v.axpy(-d, u, 1.0);
        }
        v /= v.norm();
        // Rayleigh quotient on the original matrix
        values.push(v.dot(&(l * &v)));
        found.push(v);
        let _ = rq;
    }
    values
}

// ---------------------------------------------------------------------------
// Lasso oracle

/// Cyclic coordinate descent on `‖x_i − X_i c‖² + λ‖c‖₁`, run to a fixed point.
pub fn lasso_coordinate_descent(x: &DMatrix<f64>, i: usize, lambda: f64) -> DVector<f64> {
    let m = x.ncols();
    let target = x.column(i).into_owned();
    let mut c: DVector<f64> = DVector::zeros(m);
    let mut resid = target.clone();
    for _sweep in 0..200_000 {
        let mut biggest = 0.0f64;
        for j in (0..m).filter(|&j| j != i) {
            let xj = x.column(j);
            let sq = xj.norm_squared();
            if sq == 0.0 {
                continue;
            }
            // minimise over c_j: sq·c² − 2ρc + λ|c| with ρ = x_jᵀ(r + x_j c_j)
            let rho = xj.dot(&resid) + sq * c[j];
            let new = if rho > lambda / 2.0 {
                (rho - lambda / 2.0) / sq
            } else if rho < -lambda / 2.0 {
                (rho + lambda / 2.0) / sq
            } else {
                0.0
            };
            let delta = new - c[j];
            if delta != 0.0 {
                resid.axpy(-delta, &xj, 1.0);
                c[j] = new;
                biggest = biggest.max(delta.abs());
            }
        }
        if biggest < 1e-15 {
            break;
        }
    }
    c
}

/// Worst column's fraction of ℓ₁ coefficient mass on points sharing its label.
/// Three mutually orthogonal planes in R^10, 20 unit-norm points each, no noise.
pub fn independent_planes(seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let spec = sadse::data::SubspaceSpec {
        n_ambient: 10,
        subspace_dim: 2,
        n_subspaces: 3,
        points_per: 20,
        noise_sigma: 0.0,
        independent: true,
    };
    let (ds, _) = sadse::data::synth_union_of_subspaces(&spec, seed).unwrap();
    (ds.features, ds.labels.unwrap())
}

pub fn worst_in_subspace_mass(coef: &DMatrix<f64>, labels: &[usize]) -> f64 {
    (0..coef.ncols())
        .map(|i| {
            let (mut inside, mut all) = (0.0, 0.0);
            for j in 0..coef.nrows() {
                let a = coef[(j, i)].abs();
                all += a;
                if labels[j] == labels[i] {
                    inside += a;
                }
            }
            if all == 0.0 {
                1.0
            } else {
                inside / all
            }
        })
        .fold(1.0, f64::min)
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Best accuracy over every injective relabelling of the predicted clusters.
pub fn permutation_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    // assign each predicted cluster a distinct truth class, or none
    fn search(
        c: usize,
        kp: usize,
        kt: usize,
        used: &mut Vec<bool>,
        map: &mut Vec<Option<usize>>,
        pred: &[usize],
        truth: &[usize],
        best: &mut usize,
    ) {
        if c == kp {
            let hits = pred.iter().zip(truth).filter(|(p, t)| map[**p] == Some(**t)).count();
            *best = (*best).max(hits);
            return;
        }
        map[c] = None;
        search(c + 1, kp, kt, used, map, pred, truth, best);
        for t in 0..kt {
            if !used[t] {
                used[t] = true;
                map[c] = Some(t);
                search(c + 1, kp, kt, used, map, pred, truth, best);
                used[t] = false;
            }
        }
        map[c] = None;
    }
    let mut best = 0;
    search(
        0,
        kp,
        kt,
        &mut vec![false; kt],
        &mut vec![None; kp],
        pred,
        truth,
        &mut best,
    );
    best as f64 / pred.len() as f64
}

/// `I(P;T) / sqrt(H(P)·H(T))` straight from label frequencies; 1 when both
/// labelings are constant.
pub fn entropy_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    use std::collections::HashMap;
    let n = pred.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pp: HashMap<usize, f64> = HashMap::new();
    let mut pt: HashMap<usize, f64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1.0 / n;
        *pp.entry(p).or_default() += 1.0 / n;
        *pt.entry(t).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let (hp, ht) = (h(&pp), h(&pt));
    let mi: f64 = joint
        .iter()
        .map(|(&(p, t), &pj)| pj * (pj / (pp[&p] * pt[&t])).ln())
        .sum();
    if hp == 0.0 && ht == 0.0 {
        1.0
    } else if hp == 0.0 || ht == 0.0 {
        0.0
    } else {
        mi / (hp * ht).sqrt()
    }
}
