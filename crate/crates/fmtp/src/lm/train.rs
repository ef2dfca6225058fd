//! Sequence-model training with a validation-plateau convergence tracker.

use crate::num::{AdamConfig, AdamState, Rng, Tape};
use crate::vq::TrainError;

use super::{infer::lm_loss_pure, LmModel, MaskKind, TokenSequence};

#[derive(Debug, Clone)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mask: MaskKind,
    /// Optimizer steps between validation evaluations.
    pub eval_every: u64,
    /// Convergence: validation loss improves by less than this for
    /// `plateau_patience` consecutive evaluations.
    pub plateau_delta: f64,
    pub plateau_patience: usize,
    /// Cap on validation sequences scored per evaluation.
    pub val_subset: usize,
    /// Stop training once the plateau criterion fires.
    pub stop_at_convergence: bool,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            mask: MaskKind::SemiCausal,
            eval_every: 10,
            plateau_delta: 1e-4,
            plateau_patience: 20,
            val_subset: 200,
            stop_at_convergence: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainRecord {
    /// Mean teacher-forced training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// (step, validation loss) at each evaluation.
    pub val_curve: Vec<(u64, f64)>,
    /// Optimizer step at which the plateau criterion fired.
    pub convergence_step: Option<u64>,
    pub steps: u64,
}

/// Adam on the teacher-forced future-token loss over shuffled mini-batches.
/// Validation loss is tracked on the pure inference path; the convergence
/// step records when it stops improving.
pub fn train_lm(
    model: &mut LmModel<f32>,
    train: &[TokenSequence],
    val: &[TokenSequence],
    cfg: &LmTrainConfig,
) -> Result<LmTrainRecord, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = Rng::derive(cfg.seed, 0x6c_6d);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_used = &val[..cfg.val_subset.min(val.len())];

    let mut record = LmTrainRecord {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        val_curve: Vec::new(),
        convergence_step: None,
        steps: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut plateau_streak = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut batch_loss = None;
            for &si in chunk {
                let loss = model.loss_on_tape(&mut tape, &bound, &train[si], cfg.mask)?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let loss = tape.scale(total, 1.0 / chunk.len() as f32);
            let loss_value = tape.scalar(loss) as f64;
            record.steps += 1;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { stage: "lm", epoch, step: record.steps });
            }
            tape.backward(loss)?;
            model.params.pull_grads(&tape, &bound);
            adam.step(&mut model.params)?;
            epoch_loss += loss_value;
            batches += 1;

            if !val_used.is_empty() && record.steps % cfg.eval_every == 0 {
                let val_loss = mean_loss_pure(model, val_used, cfg.mask);
                record.val_curve.push((record.steps, val_loss));
                if best_val - val_loss >= cfg.plateau_delta {
                    best_val = val_loss;
                    plateau_streak = 0;
                } else {
                    plateau_streak += 1;
                    if plateau_streak >= cfg.plateau_patience && record.convergence_step.is_none()
                    {
                        record.convergence_step = Some(record.steps);
                        if cfg.stop_at_convergence {
                            record.epoch_losses.push(epoch_loss / batches as f64);
                            break 'epochs;
                        }
                    }
                }
            }
        }
        record.epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(record)
}

/// Mean pure-path loss over a token set.
pub fn mean_loss_pure(model: &LmModel<f32>, seqs: &[TokenSequence], kind: MaskKind) -> f64 {
    if seqs.is_empty() {
        return f64::NAN;
    }
    seqs.iter().map(|s| lm_loss_pure(model, s, kind)).sum::<f64>() / seqs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn token_corpus(seed: u64, n: usize, vocab: usize) -> Vec<TokenSequence> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let tokens = (0..10).map(|_| rng.below(vocab)).collect();
                TokenSequence::new(tokens, 4, 6)
            })
            .collect()
    }

    #[test]
    fn memorizes_four_sequences() {
        let mut rng = Rng::new(17);
        let mut model = LmModel::new(
            LmConfig { vocab: 16, d_model: 32, heads: 2, layers: 2, ff: 48, max_len: 10 },
            &mut rng,
        );
        let train = token_corpus(3, 4, 16);
        let cfg = LmTrainConfig {
            epochs: 300,
            batch_size: 4,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let record = train_lm(&mut model, &train, &[], &cfg).unwrap();
        let final_loss = *record.epoch_losses.last().unwrap();
        assert!(final_loss < 0.05, "final training loss {final_loss}");
    }

    #[test]
    fn convergence_step_is_bounded_by_total_steps() {
        let mut rng = Rng::new(23);
        let mut model = LmModel::new(
            LmConfig { vocab: 8, d_model: 16, heads: 2, layers: 1, ff: 16, max_len: 10 },
            &mut rng,
        );
        let train = token_corpus(4, 64, 8);
        let val = token_corpus(5, 32, 8);
        let cfg = LmTrainConfig {
            epochs: 40,
            batch_size: 16,
            eval_every: 2,
            plateau_patience: 5,
            ..Default::default()
        };
        let record = train_lm(&mut model, &train, &val, &cfg).unwrap();
        if let Some(step) = record.convergence_step {
            assert!(step > 0 && step <= record.steps);
        }
        assert!(!record.val_curve.is_empty());
    }

    #[test]
    fn fixed_seed_training_is_bitwise_deterministic() {
        let run = || {
            let mut rng = Rng::new(31);
            let mut model = LmModel::new(
                LmConfig { vocab: 8, d_model: 16, heads: 2, layers: 1, ff: 16, max_len: 10 },
                &mut rng,
            );
            let train = token_corpus(6, 48, 8);
            let cfg = LmTrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
            train_lm(&mut model, &train, &[], &cfg).unwrap().epoch_losses
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
