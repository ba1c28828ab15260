use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{self, LossBreakdown, LossInputs, LossVariant, LossWeights, StructureMatrix};
use super::mlp::{Activation, Mlp, MlpGrads};
use super::optim::{OptimizerConfig, OptimizerState};
use crate::data::DataBatch;
use crate::error::{Error, Result};
use crate::spectral::SpectralTarget;

/// Encoder `n → … → k` and its mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    /// Tanh hidden layers, linear outputs; the decoder mirrors `encoder_sizes`.
    pub fn new(encoder_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::new(encoder_sizes, Activation::Tanh, Activation::Linear, &mut rng)?;
        let rev: Vec<usize> = encoder_sizes.iter().rev().copied().collect();
        let decoder = Mlp::new(&rev, Activation::Tanh, Activation::Linear, &mut rng)?;
        Ok(Self { encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn embed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.encoder.predict(x)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }
}

/// `depth + 1` widths from `input` down to `latent`, geometrically spaced.
pub fn geometric_sizes(input: usize, latent: usize, depth: usize) -> Vec<usize> {
    let depth = depth.max(1);
    let ratio = (latent as f64 / input as f64).powf(1.0 / depth as f64);
    let mut sizes: Vec<usize> = (0..=depth)
        .map(|i| ((input as f64) * ratio.powi(i as i32)).round().max(1.0) as usize)
        .collect();
    sizes[0] = input;
    sizes[depth] = latent;
    sizes
}

#[derive(Debug, Clone)]
pub struct AutoencoderGrads {
    pub breakdown: LossBreakdown,
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

/// Supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchSupervision<'a> {
    pub targets: &'a SpectralTarget,
    pub structure: Option<&'a StructureMatrix>,
}

/// Loss and exact reverse-mode gradients for both networks.
pub fn loss_gradients(
    ae: &Autoencoder,
    x: &DMatrix<f64>,
    sup: BatchSupervision,
    weights: LossWeights,
    variant: LossVariant,
) -> Result<AutoencoderGrads> {
    let enc = ae.encoder.forward(x)?;
    let dec = ae.decoder.forward(&enc.output)?;
    let inputs = LossInputs {
        latent: &enc.output,
        reconstruction: &dec.output,
        data: x,
        targets: &sup.targets.vectors,
        structure: sup.structure,
        weights,
        variant,
    };
    let (breakdown, out) = loss::loss_and_output_grads(&inputs)?;
    let (decoder, through_decoder) = ae.decoder.backward(&dec, &out.reconstruction);
    let (encoder, _) = ae.encoder.backward(&enc, &(out.latent + through_decoder));
    Ok(AutoencoderGrads {
        breakdown,
        encoder,
        decoder,
    })
}

/// Reconstruction loss and gradients.
pub fn reconstruction_gradients(ae: &Autoencoder, x: &DMatrix<f64>) -> Result<AutoencoderGrads> {
    let enc = ae.encoder.forward(x)?;
    let dec = ae.decoder.forward(&enc.output)?;
    let (total, grad) = loss::reconstruction_loss(x, &dec.output)?;
    let (decoder, through) = ae.decoder.backward(&dec, &grad);
    let (encoder, _) = ae.encoder.backward(&enc, &through);
    Ok(AutoencoderGrads {
        breakdown: LossBreakdown {
            reconstruction: total,
            total,
            ..Default::default()
        },
        encoder,
        decoder,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Keep decoder weights fixed; the reconstruction term still reaches the encoder.
    pub freeze_decoder: bool,
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64, optimizer: OptimizerConfig) -> Self {
        Self {
            epochs,
            seed,
            optimizer,
            freeze_decoder: false,
        }
    }
}

/// Loss summed over all batches of one epoch, measured before each step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLoss {
    pub epoch: usize,
    pub breakdown: LossBreakdown,
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.reconstruction += b.reconstruction;
    acc.spectral_l1 += b.spectral_l1;
    acc.spectral_l2 += b.spectral_l2;
    acc.orthogonality += b.orthogonality;
    acc.structure += b.structure;
    acc.total += b.total;
}

struct Stepper {
    encoder: OptimizerState,
    decoder: OptimizerState,
    freeze_decoder: bool,
}

impl Stepper {
    fn new(opts: &TrainOptions) -> Result<Self> {
        opts.optimizer.validate()?;
        Ok(Self {
            encoder: OptimizerState::new(opts.optimizer),
            decoder: OptimizerState::new(opts.optimizer),
            freeze_decoder: opts.freeze_decoder,
        })
    }

    fn apply(&mut self, ae: &mut Autoencoder, g: &AutoencoderGrads) -> Result<()> {
        self.encoder.step(&mut ae.encoder.tensors_mut(), &g.encoder.tensors())?;
        if !self.freeze_decoder {
            self.decoder.step(&mut ae.decoder.tensors_mut(), &g.decoder.tensors())?;
        }
        Ok(())
    }
}

fn run_epochs<F>(
    ae: &mut Autoencoder,
    n_batches: usize,
    opts: &TrainOptions,
    mut grads_for: F,
) -> Result<Vec<EpochLoss>>
where
    F: FnMut(&Autoencoder, usize) -> Result<AutoencoderGrads>,
{
    let mut stepper = Stepper::new(opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for &b in &order {
            let g = grads_for(ae, b)?;
            if !g.breakdown.total.is_finite() {
                return Err(Error::TrainingDiverged { epoch, last_finite });
            }
            accumulate(&mut acc, &g.breakdown);
            stepper.apply(ae, &g)?;
        }
        if !ae.is_finite() {
            return Err(Error::TrainingDiverged { epoch, last_finite });
        }
        last_finite = acc.total;
        log::debug!("epoch {epoch}: loss {:.6}", acc.total);
        history.push(EpochLoss { epoch, breakdown: acc });
    }
    Ok(history)
}

/// First phase: reconstruction loss only.
pub fn pretrain_autoencoder(
    ae: &mut Autoencoder,
    batches: &[DataBatch],
    opts: &TrainOptions,
) -> Result<Vec<EpochLoss>> {
    run_epochs(ae, batches.len(), opts, |ae, b| {
        reconstruction_gradients(ae, &batches[b].features)
    })
}

/// Second phase: the chosen composite loss against precomputed per-batch
/// targets (and self-expression matrices for the structure variant).
pub fn train_sadse(
    ae: &mut Autoencoder,
    batches: &[DataBatch],
    targets: &[SpectralTarget],
    structures: Option<&[StructureMatrix]>,
    weights: LossWeights,
    variant: LossVariant,
    opts: &TrainOptions,
) -> Result<Vec<EpochLoss>> {
    weights.validate()?;
    if targets.len() != batches.len() {
        return Err(Error::config(format!(
            "{} spectral targets for {} batches",
            targets.len(),
            batches.len()
        )));
    }
    match (variant, structures) {
        (LossVariant::Lh, None) => {
            return Err(Error::config(
                "structure loss requires one self-expression matrix per batch",
            ));
        }
        (_, Some(s)) if s.len() != batches.len() => {
            return Err(Error::config(format!(
                "{} self-expression matrices for {} batches",
                s.len(),
                batches.len()
            )));
        }
        _ => {}
    }
    for (b, t) in batches.iter().zip(targets) {
        if t.vectors.ncols() != b.len() || t.k() != ae.latent_dim() {
            return Err(Error::config(format!(
                "batch {} targets are {:?}, expected {}×{}",
                b.batch_id,
                t.vectors.shape(),
                ae.latent_dim(),
                b.len()
            )));
        }
    }
    run_epochs(ae, batches.len(), opts, |ae, b| {
        let sup = BatchSupervision {
            targets: &targets[b],
            structure: structures.map(|s| &s[b]),
        };
        loss_gradients(ae, &batches[b].features, sup, weights, variant)
    })
}
