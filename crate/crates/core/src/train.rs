//! Adam and the training loop: every pair runs a clean and a noisy pass
//! through the shared audio encoder, and the batch-averaged gradient of the
//! weighted loss updates all parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::LabeledPair;
use crate::dsp::{mix_at_snr, FeatureExtractor, Waveform};
use crate::error::{Error, Result};
use crate::losses::{detection_loss_on, target_for, total_loss_on, DetectionPhase, LossWeights};
use crate::model::{encode_audio, forward_on_tape, ModelConfig, ModelParams};
use crate::seeds::{derive_seed, TAG_BATCH, TAG_INIT, TAG_NOISE_MIX, TAG_SCATTER};
use crate::tensor::Tensor;
use crate::text::phoneme_onehot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub loss: LossWeights,
    /// Range the per-pair mixing SNR is drawn from, in dB.
    pub snr_db: [f64; 2],
    /// Steps between evaluation callbacks; 0 disables them.
    pub eval_interval: usize,
    /// Worker threads for the per-pair passes of a batch.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            model_dim: crate::model::EMBED_DIM,
            loss: LossWeights::default(),
            snr_db: [5.0, 15.0],
            eval_interval: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if self.model_dim == 0 {
            return Err(Error::param("model_dim must be positive"));
        }
        let [lo, hi] = self.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::param("snr_db must be a finite [low, high] range"));
        }
        if self.threads == 0 {
            return Err(Error::param("threads must be at least 1"));
        }
        self.loss.validate()
    }

    /// First step trained with focal loss.
    pub fn switch_step(&self) -> usize {
        (self.loss.switch_fraction * self.steps as f64).floor() as usize
    }

    pub fn phase_at(&self, step: usize) -> DetectionPhase {
        if step < self.switch_step() {
            DetectionPhase::Bce
        } else {
            DetectionPhase::Focal
        }
    }
}

/// Bias-corrected Adam with per-tensor moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        let mut named = params.named_mut();
        if grads.len() != named.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} tensors",
                grads.len(),
                named.len()
            )));
        }
        for ((name, t), g) in named.iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(Error::shape(format!(
                    "gradient for {name} has {} values, tensor {}",
                    g.len(),
                    t.numel()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for (i, (_, t)) in named.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Unweighted loss components for one pair or averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub denoising: f64,
    pub matching: f64,
    pub detection: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.denoising += o.denoising;
        self.matching += o.matching;
        self.detection += o.detection;
        self.total += o.total;
    }

    fn scaled(self, c: f64) -> LossParts {
        LossParts {
            denoising: self.denoising * c,
            matching: self.matching * c,
            detection: self.detection * c,
            total: self.total * c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: LossParts,
    pub phase: DetectionPhase,
}

pub const METRICS_HEADER: &str = "step,l_dn,l_mm,l_d,total,phase";

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in log {
        let l = &m.losses;
        writeln!(
            s,
            "{},{},{},{},{},{}",
            m.step,
            l.denoising,
            l.matching,
            l.detection,
            l.total,
            m.phase.name()
        )
        .ok();
    }
    s
}

pub fn write_metrics_csv(path: &Path, log: &[StepMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

/// The noisy copy of a clean clip: a random stretch of a random noise clip
/// (white noise when none is available) mixed at an SNR drawn from `snr_db`.
pub fn noisy_variant(clean: &Waveform, noise: &[Waveform], snr_db: [f64; 2], rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let snr = if snr_db[0] < snr_db[1] {
        rng.random_range(snr_db[0]..=snr_db[1])
    } else {
        snr_db[0]
    };
    let noise_clip = if noise.is_empty() {
        let white = Normal::new(0.0, 0.1).map_err(|e| Error::param(e.to_string()))?;
        Waveform::new((0..clean.len()).map(|_| white.sample(rng)).collect(), clean.sample_rate)?
    } else {
        let src = &noise[rng.random_range(0..noise.len())];
        if src.sample_rate != clean.sample_rate {
            return Err(Error::param(format!(
                "noise is {} Hz, speech is {} Hz",
                src.sample_rate, clean.sample_rate
            )));
        }
        let offset = rng.random_range(0..src.len().max(1));
        let samples = src.samples[offset..]
            .iter()
            .chain(&src.samples[..offset])
            .copied()
            .collect();
        Waveform::new(samples, src.sample_rate)?
    };
    mix_at_snr(clean, &noise_clip, snr)
}

/// Loss and parameter gradients for one pair, in [`ModelParams::named`]
/// order.
pub fn pair_gradients(
    params: &ModelParams,
    pair: &LabeledPair,
    noisy_features: &Tensor,
    phase: DetectionPhase,
    weights: &LossWeights,
    scatter_seed: u64,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let clean = tape.constant(pair.features.frames.clone());
    let onehot = tape.constant(phoneme_onehot(&pair.phonemes)?);
    let out = forward_on_tape(&mut tape, clean, onehot, &vars)?;

    let noisy_in = tape.constant(noisy_features.clone());
    let e_noisy = if weights.lambda_dn > 0.0 {
        encode_audio(&mut tape, noisy_in, &vars)?
    } else {
        // Logged but untrained: evaluate the noisy branch off the tape.
        let mut side = Tape::new();
        let frozen = params.bind(&mut side, false);
        let x = side.constant(noisy_features.clone());
        let e = encode_audio(&mut side, x, &frozen)?;
        tape.constant(side.value(e).clone())
    };
    let l_dn = tape.mse(out.e_a, e_noisy)?;

    let (t_t, t_a) = tape.value(out.affinity).dims2()?;
    let target = tape.constant(target_for(
        pair.match_type,
        t_t,
        t_a,
        weights.diagonal_width,
        scatter_seed,
    )?);
    let l_mm = tape.mse(out.affinity, target)?;
    let l_d = detection_loss_on(&mut tape, out.prob, pair.label, phase, weights)?;
    let terms = total_loss_on(&mut tape, l_dn, l_mm, l_d, weights)?;
    tape.backward(terms.total)?;

    let item = |v| tape.value(v).item();
    let parts = LossParts {
        denoising: item(terms.denoising)?,
        matching: item(terms.matching)?,
        detection: item(terms.detection)?,
        total: item(terms.total)?,
    };
    let grads = vars
        .all()
        .into_iter()
        .map(|v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Contract("missing parameter gradient".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepMetrics>,
}

impl TrainOutcome {
    /// Mean total loss over the first and last `fraction` of steps.
    pub fn loss_trend(&self, fraction: f64) -> (f64, f64) {
        let n = ((self.log.len() as f64 * fraction).ceil() as usize).clamp(1, self.log.len().max(1));
        let mean = |s: &[StepMetrics]| s.iter().map(|m| m.losses.total).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.log[..n]), mean(&self.log[self.log.len() - n..]))
    }
}

pub fn initial_params(config: &TrainConfig) -> ModelParams {
    ModelParams::init(
        ModelConfig::with_dim(config.model_dim),
        derive_seed(config.seed, &[TAG_INIT]),
    )
}

pub fn train(pairs: &[LabeledPair], noise: &[Waveform], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(pairs, noise, config, initial_params(config), |_, _| Ok(()))
}

/// Full training loop starting from `params`. `on_eval` runs after every
/// `eval_interval` steps with the step count and current weights.
pub fn train_with<F>(
    pairs: &[LabeledPair],
    noise: &[Waveform],
    config: &TrainConfig,
    mut params: ModelParams,
    mut on_eval: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training corpus has no pairs"));
    }
    if noise.is_empty() {
        log::warn!("no noise clips available; the noisy branch uses white noise");
    }
    let sample_rate = pairs[0].waveform.sample_rate;
    let extractor = FeatureExtractor::new(sample_rate)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut log = Vec::with_capacity(config.steps);
    let batch = config.batch_size.min(pairs.len());

    for step in 0..config.steps {
        let phase = config.phase_at(step);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_BATCH, step as u64]));
        let chosen = sample(&mut rng, pairs.len(), batch).into_vec();

        let current = &params;
        let results: Vec<(LossParts, Vec<Vec<f64>>)> = pool.install(|| {
            chosen
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let pair = &pairs[idx];
                    let mut mix_rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_NOISE_MIX, step as u64, slot as u64]));
                    let noisy = noisy_variant(&pair.waveform, noise, config.snr_db, &mut mix_rng)?;
                    let noisy_features = extractor.log_mel(&noisy)?;
                    let scatter = derive_seed(config.seed, &[TAG_SCATTER, step as u64, idx as u64]);
                    pair_gradients(current, pair, &noisy_features.frames, phase, &config.loss, scatter)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut mean_parts = LossParts::default();
        let mut grads: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
        for (parts, g) in &results {
            mean_parts.add(parts);
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        let inv = 1.0 / results.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("training gradient"));
        }
        adam.step(&mut params, &grads)?;
        log.push(StepMetrics {
            step,
            losses: mean_parts.scaled(inv),
            phase,
        });
        if config.eval_interval > 0 && (step + 1) % config.eval_interval == 0 {
            on_eval(step + 1, &params)?;
        }
    }
    Ok(TrainOutcome { params, log })
}
