//! Ablation harnesses: the memory-scale sweep and the semi-causal vs causal
//! convergence comparison.

use crate::data::{normalize, Corpus, Dataset, NormalizationMode, Trajectory};
use crate::lm::{train_lm, LmConfig, LmModel, LmTrainConfig, MaskKind, TokenSequence};
use crate::num::Rng;
use crate::vq::{
    codebook_report, storage_bytes, train_vq, TrainError, VqConfig, VqModel, VqTrainConfig,
};

use super::{evaluate, EvalError, PredictConfig};

/// Everything the staged pipeline needs, bundled for the harnesses.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub vq: VqConfig,
    pub lm: LmConfig,
    pub vq_train: VqTrainConfig,
    pub lm_train: LmTrainConfig,
    pub predict: PredictConfig,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Normalizes and tokenizes every trajectory of a dataset.
pub fn tokenize_dataset(
    vq: &VqModel<f32>,
    dataset: &Dataset,
    normalization: NormalizationMode,
) -> Vec<TokenSequence> {
    dataset
        .trajectories
        .iter()
        .map(|t| {
            let (norm, _) = normalize(t, normalization);
            vq.tokenize(&norm)
        })
        .collect()
}

/// Mean per-point reconstruction displacement on a dataset (held-out check).
pub fn reconstruction_ade(
    vq: &VqModel<f32>,
    dataset: &Dataset,
    normalization: NormalizationMode,
) -> f64 {
    crate::vq::train::reconstruction_ade(vq, dataset, normalization)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub theta: usize,
    pub storage_bytes: usize,
    pub recon_ade: f64,
    pub pred_ade: f64,
    pub pred_fde: f64,
    pub utilization: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub n_k: usize,
}

/// Trains the full pipeline per memory scale at a fixed seed and tabulates
/// storage, reconstruction, prediction quality, and utilization.
pub fn sweep_theta(
    corpus: &Corpus,
    thetas: &[usize],
    base: &PipelineConfig,
) -> Result<SweepTable, AblationError> {
    assert!(!thetas.is_empty(), "theta list must be nonempty");
    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let vq_cfg = VqConfig { k: theta, ..base.vq.clone() };
        let lm_cfg = LmConfig { vocab: theta, ..base.lm.clone() };
        let mut rng = Rng::derive(base.seed, theta as u64);
        let mut vq = VqModel::new(vq_cfg, &mut rng);
        train_vq(&mut vq, &corpus.train, &base.vq_train)?;

        let recon_ade =
            reconstruction_ade(&vq, &corpus.val, base.vq_train.normalization);
        let train_tokens = tokenize_dataset(&vq, &corpus.train, base.vq_train.normalization);
        let val_tokens = tokenize_dataset(&vq, &corpus.val, base.vq_train.normalization);

        let mut lm = LmModel::new(lm_cfg, &mut rng);
        train_lm(&mut lm, &train_tokens, &val_tokens, &base.lm_train)?;

        let report = evaluate(&vq, &lm, &corpus.test.trajectories, &base.predict)?;
        let usage = {
            let normalized: Vec<Trajectory> = corpus
                .train
                .trajectories
                .iter()
                .map(|t| normalize(t, base.vq_train.normalization).0)
                .collect();
            codebook_report(&vq, normalized.iter())
        };
        rows.push(SweepRow {
            theta,
            storage_bytes: storage_bytes(theta, base.vq.n_k),
            recon_ade,
            pred_ade: report.mean_ade,
            pred_fde: report.mean_fde,
            utilization: usage.utilization(),
            perplexity: usage.perplexity(),
        });
    }
    Ok(SweepTable { rows, n_k: base.vq.n_k })
}

#[derive(Debug, Clone)]
pub struct MaskRow {
    pub kind: MaskKind,
    /// Optimizer step at which the validation plateau fired.
    pub convergence_step: Option<u64>,
    pub total_steps: u64,
    pub final_val_loss: f64,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone)]
pub struct MaskComparison {
    pub semi_causal: MaskRow,
    pub causal: MaskRow,
}

/// Trains one shared VQ stage, then two sequence models at identical seeds
/// and bitwise-identical data order, differing only in the attention mask.
pub fn compare_masks(corpus: &Corpus, base: &PipelineConfig) -> Result<MaskComparison, AblationError> {
    let mut rng = Rng::derive(base.seed, 0x6d_61_73_6b);
    let mut vq = VqModel::new(base.vq.clone(), &mut rng);
    train_vq(&mut vq, &corpus.train, &base.vq_train)?;
    let train_tokens = tokenize_dataset(&vq, &corpus.train, base.vq_train.normalization);
    let val_tokens = tokenize_dataset(&vq, &corpus.val, base.vq_train.normalization);

    let run = |kind: MaskKind| -> Result<MaskRow, AblationError> {
        let mut lm_rng = Rng::derive(base.seed, 0x6c_6d_5f_61);
        let mut lm = LmModel::new(base.lm.clone(), &mut lm_rng);
        let cfg = LmTrainConfig { mask: kind, ..base.lm_train.clone() };
        let record = train_lm(&mut lm, &train_tokens, &val_tokens, &cfg)?;
        let predict = PredictConfig { mask: kind, ..base.predict };
        let report = evaluate(&vq, &lm, &corpus.test.trajectories, &predict)?;
        Ok(MaskRow {
            kind,
            convergence_step: record.convergence_step,
            total_steps: record.steps,
            final_val_loss: record.val_curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN),
            ade: report.mean_ade,
            fde: report.mean_fde,
        })
    };

    Ok(MaskComparison { semi_causal: run(MaskKind::SemiCausal)?, causal: run(MaskKind::Causal)? })
}
