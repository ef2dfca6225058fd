//! Joint training of encoders, decoder, and memory array.

use crate::data::{normalize, Dataset, NormalizationMode, Trajectory};
use crate::num::{AdamConfig, AdamState, NumError, Rng, Tape};

use super::VqModel;

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error("{stage} training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { stage: &'static str, epoch: usize, step: u64 },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stream seed for shuffling and dead-entry draws.
    pub seed: u64,
    /// An entry unused for this many consecutive optimizer steps is
    /// reinitialized to an encoder output drawn from the current batch.
    pub dead_entry_steps: u64,
    pub normalization: NormalizationMode,
    /// Cosine-decay the learning rate to 5% of its initial value over the
    /// full run.
    pub cosine_decay: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
            dead_entry_steps: 100,
            normalization: NormalizationMode::Translation,
            cosine_decay: true,
        }
    }
}

/// Per-epoch averages of the three loss terms plus codebook utilization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqEpochStats {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone)]
pub struct VqTrainRecord {
    pub epochs: Vec<VqEpochStats>,
    pub steps: u64,
    pub dead_entries_reinitialized: u64,
}

/// Adam over the joint loss on shuffled mini-batches. Trajectories are
/// normalized once up front; dead entries are revived from current batch
/// encodings.
pub fn train_vq(
    model: &mut VqModel<f32>,
    train: &Dataset,
    cfg: &VqTrainConfig,
) -> Result<VqTrainRecord, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let normalized: Vec<Trajectory> =
        train.trajectories.iter().map(|t| normalize(t, cfg.normalization).0).collect();

    let mut rng = Rng::derive(cfg.seed, 0x76_71);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &model.params);
    let batches_per_epoch = normalized.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1) as f64;
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    let k = model.config.k;
    let n_k = model.config.n_k;
    let mut steps_since_used = vec![0u64; k];
    let mut record =
        VqTrainRecord { epochs: Vec::with_capacity(cfg.epochs), steps: 0, dead_entries_reinitialized: 0 };

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        let mut used_this_epoch = vec![false; k];

        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut batch_total = None;
            let mut batch_terms = [0.0f64; 3];
            let mut used_in_batch = vec![false; k];
            let mut encoder_rows: Vec<Vec<f32>> = Vec::new();

            for &ti in chunk {
                let fwd = model.losses_on_tape(&mut tape, &bound, &normalized[ti])?;
                for &idx in &fwd.indices {
                    used_in_batch[idx] = true;
                    used_this_epoch[idx] = true;
                    model.usage_counts[idx] += 1;
                }
                for row in tape.data(fwd.v_a).chunks_exact(n_k) {
                    encoder_rows.push(row.to_vec());
                }
                batch_terms[0] += tape.scalar(fwd.reconstruction) as f64;
                batch_terms[1] += tape.scalar(fwd.codebook) as f64;
                batch_terms[2] += tape.scalar(fwd.commitment) as f64;
                batch_total = Some(match batch_total {
                    None => fwd.total,
                    Some(acc) => tape.add(acc, fwd.total)?,
                });
            }

            let total = batch_total.expect("non-empty batch");
            let loss = tape.scale(total, 1.0 / chunk.len() as f32);
            let loss_value = tape.scalar(loss) as f64;
            record.steps += 1;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { stage: "vq", epoch, step: record.steps });
            }

            tape.backward(loss)?;
            model.params.pull_grads(&tape, &bound);
            if cfg.cosine_decay {
                let progress = record.steps as f64 / total_steps;
                let factor = 0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                adam.set_learning_rate(cfg.learning_rate * factor);
            }
            adam.step(&mut model.params)?;

            // Dead-entry bookkeeping runs per optimizer step.
            let mut dead: Vec<usize> = Vec::new();
            for e in 0..k {
                if used_in_batch[e] {
                    steps_since_used[e] = 0;
                } else {
                    steps_since_used[e] += 1;
                    if steps_since_used[e] >= cfg.dead_entry_steps {
                        dead.push(e);
                    }
                }
            }
            if !dead.is_empty() && !encoder_rows.is_empty() {
                let handle = model.memory_handle();
                let entries = model.params.tensor_mut(handle).data_mut();
                for e in dead {
                    let row = &encoder_rows[rng.below(encoder_rows.len())];
                    entries[e * n_k..(e + 1) * n_k].copy_from_slice(row);
                    steps_since_used[e] = 0;
                    record.dead_entries_reinitialized += 1;
                }
            }

            let b = chunk.len() as f64;
            sums[0] += batch_terms[0] / b;
            sums[1] += batch_terms[1] / b;
            sums[2] += batch_terms[2] / b;
            sums[3] += loss_value;
            batches += 1;
        }

        let inv = 1.0 / batches as f64;
        record.epochs.push(VqEpochStats {
            reconstruction: sums[0] * inv,
            codebook: sums[1] * inv,
            commitment: sums[2] * inv,
            total: sums[3] * inv,
            utilization: used_this_epoch.iter().filter(|&&u| u).count() as f64 / k as f64,
        });
    }
    Ok(record)
}

/// Mean reconstruction displacement (per point) over a dataset, in the same
/// coordinates the metric caller chose (normalization cancels under
/// translation).
pub fn reconstruction_ade(
    model: &VqModel<f32>,
    dataset: &Dataset,
    normalization: NormalizationMode,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in &dataset.trajectories {
        let (norm, _) = normalize(traj, normalization);
        let decoded = model.reconstruct(&norm);
        for (a, b) in decoded.iter().zip(&norm.points) {
            total += a.dist(*b);
        }
        count += decoded.len();
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Split, SynthConfig};
    use crate::vq::VqConfig;

    #[test]
    fn single_trajectory_overfits_to_near_zero() {
        let mut rng = Rng::new(11);
        let corpus = synth_generate(
            &mut rng,
            &SynthConfig { n: 1, noise_sigma: 0.0, train_frac: 1.0, val_frac: 0.0, ..Default::default() },
        );
        let mut model_rng = Rng::new(3);
        let mut model = VqModel::new(VqConfig { k: 4, ..Default::default() }, &mut model_rng);
        let cfg = VqTrainConfig {
            epochs: 800,
            batch_size: 1,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let record = train_vq(&mut model, &corpus.train, &cfg).unwrap();
        let last = record.epochs.last().unwrap();
        assert!(
            last.reconstruction < 1e-3,
            "reconstruction stayed at {}",
            last.reconstruction
        );
    }

    #[test]
    fn fixed_seed_loss_curve_is_bitwise_identical() {
        let run = || {
            let mut rng = Rng::new(21);
            let corpus = synth_generate(&mut rng, &SynthConfig { n: 40, ..Default::default() });
            let mut model_rng = Rng::new(9);
            let mut model =
                VqModel::new(VqConfig { k: 16, ..Default::default() }, &mut model_rng);
            let cfg = VqTrainConfig { epochs: 3, batch_size: 8, seed: 5, ..Default::default() };
            train_vq(&mut model, &corpus.train, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ea.total.to_bits(), eb.total.to_bits());
            assert_eq!(ea.reconstruction.to_bits(), eb.reconstruction.to_bits());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model_rng = Rng::new(1);
        let mut model = VqModel::new(VqConfig::default(), &mut model_rng);
        let empty = Dataset { trajectories: vec![], split: Split::Train };
        assert!(matches!(
            train_vq(&mut model, &empty, &VqTrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }
}
