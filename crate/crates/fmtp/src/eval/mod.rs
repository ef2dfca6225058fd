//! Metrics and end-to-end prediction: ADE/FDE with best-of-K selection, a
//! constant-velocity baseline, the tokenize -> sample -> decode -> denormalize
//! pipeline, a latency benchmark, and the ablation harnesses.

mod ablation;
mod bench;
pub mod report;

pub use ablation::{
    compare_masks, reconstruction_ade, sweep_theta, tokenize_dataset, AblationError,
    MaskComparison, MaskRow, PipelineConfig, SweepRow, SweepTable,
};
pub use bench::{latency_bench, LatencyReport};

use crate::data::{denormalize_points, normalize, NormalizationMode, Point, Trajectory};
use crate::lm::{sample_future, LmModel, MaskKind, SampleConfig};
use crate::vq::VqModel;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and ground truth lengths differ: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("best_of_k requires at least one sample")]
    EmptySampleSet,
    #[error("constant-velocity baseline needs at least 2 observed frames, got {0}")]
    TooFewObserved(usize),
}

/// Mean Euclidean displacement over all frames.
pub fn ade(pred: &[Point], gt: &[Point]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum();
    Ok(sum / pred.len() as f64)
}

/// Euclidean displacement at the final frame.
pub fn fde(pred: &[Point], gt: &[Point]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    Ok(pred.last().unwrap().dist(*gt.last().unwrap()))
}

/// Minimum ADE and FDE over a sample set, minimized independently (the best
/// ADE and best FDE may come from different samples).
pub fn best_of_k(samples: &[Vec<Point>], gt: &[Point]) -> Result<(f64, f64), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySampleSet);
    }
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for s in samples {
        best_ade = best_ade.min(ade(s, gt)?);
        best_fde = best_fde.min(fde(s, gt)?);
    }
    Ok((best_ade, best_fde))
}

/// Extrapolates the final observed velocity for t_pred steps.
pub fn constant_velocity_baseline(traj: &Trajectory) -> Result<Vec<Point>, EvalError> {
    if traj.t_obs < 2 {
        return Err(EvalError::TooFewObserved(traj.t_obs));
    }
    let last = traj.points[traj.t_obs - 1];
    let prev = traj.points[traj.t_obs - 2];
    let (vx, vy) = (last.x - prev.x, last.y - prev.y);
    Ok((1..=traj.t_pred)
        .map(|i| Point::new(last.x + vx * i as f64, last.y + vy * i as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    pub k_samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub mask: MaskKind,
    pub normalization: NormalizationMode,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            k_samples: 20,
            temperature: 1.0,
            seed: 0,
            mask: MaskKind::SemiCausal,
            normalization: NormalizationMode::Translation,
        }
    }
}

/// K sampled futures for one trajectory, in original (denormalized)
/// coordinates, next to its ground truth.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub agent_id: i64,
    pub samples: Vec<Vec<Point>>,
    pub ground_truth: Vec<Point>,
    pub observed: Vec<Point>,
}

/// normalize -> tokenize prefix -> sample future tokens K times -> decode the
/// full token sequence -> keep the last t_pred frames -> denormalize.
/// A pure function of (models, trajectory, config.seed).
pub fn predict(
    vq: &VqModel<f32>,
    lm: &LmModel<f32>,
    traj: &Trajectory,
    cfg: &PredictConfig,
) -> PredictionSet {
    let (norm, transform) = normalize(traj, cfg.normalization);
    let observed_tokens = vq.tokenize_observed(&norm);
    let sample_cfg =
        SampleConfig { k_samples: cfg.k_samples, temperature: cfg.temperature, seed: cfg.seed };
    let futures = sample_future(lm, &observed_tokens, vq.config.tokens_pred(), &sample_cfg, cfg.mask);
    let samples = futures
        .into_iter()
        .map(|future_tokens| {
            let mut indices = observed_tokens.clone();
            indices.extend(future_tokens);
            let decoded = vq.decode_indices(&indices);
            let future = &decoded[traj.t_obs..];
            denormalize_points(future, &transform)
        })
        .collect();
    PredictionSet {
        agent_id: traj.agent_id,
        samples,
        ground_truth: traj.future().to_vec(),
        observed: traj.observed().to_vec(),
    }
}

/// Per-trajectory best-of-K metrics with the constant-velocity baseline
/// alongside.
#[derive(Debug, Clone)]
pub struct TrajectoryMetrics {
    pub index: usize,
    pub agent_id: i64,
    pub best_ade: f64,
    pub best_fde: f64,
    pub cv_ade: f64,
    pub cv_fde: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<TrajectoryMetrics>,
    pub mean_ade: f64,
    pub mean_fde: f64,
    pub mean_cv_ade: f64,
    pub mean_cv_fde: f64,
    pub k_samples: usize,
    /// Mask/normalization/seed echo for the report header.
    pub config_echo: String,
}

/// Predicts every trajectory with a per-trajectory seed stream derived from
/// `cfg.seed` and scores best-of-K against ground truth.
pub fn evaluate(
    vq: &VqModel<f32>,
    lm: &LmModel<f32>,
    trajectories: &[Trajectory],
    cfg: &PredictConfig,
) -> Result<MetricsReport, EvalError> {
    let mut rows = Vec::with_capacity(trajectories.len());
    for (index, traj) in trajectories.iter().enumerate() {
        let per_traj = PredictConfig {
            seed: crate::num::Rng::derive(cfg.seed, index as u64).next_u64(),
            ..*cfg
        };
        let prediction = predict(vq, lm, traj, &per_traj);
        let (best_ade, best_fde) = best_of_k(&prediction.samples, &prediction.ground_truth)?;
        let cv = constant_velocity_baseline(traj)?;
        rows.push(TrajectoryMetrics {
            index,
            agent_id: traj.agent_id,
            best_ade,
            best_fde,
            cv_ade: ade(&cv, traj.future())?,
            cv_fde: fde(&cv, traj.future())?,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(MetricsReport {
        mean_ade: rows.iter().map(|r| r.best_ade).sum::<f64>() / n,
        mean_fde: rows.iter().map(|r| r.best_fde).sum::<f64>() / n,
        mean_cv_ade: rows.iter().map(|r| r.cv_ade).sum::<f64>() / n,
        mean_cv_fde: rows.iter().map(|r| r.cv_fde).sum::<f64>() / n,
        k_samples: cfg.k_samples,
        config_echo: format!(
            "k={} temperature={} seed={} mask={} normalization={:?}",
            cfg.k_samples, cfg.temperature, cfg.seed, cfg.mask.name(), cfg.normalization
        ),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Rng;

    fn line(n: usize, step: (f64, f64), offset: (f64, f64)) -> Vec<Point> {
        (0..n)
            .map(|i| Point::new(offset.0 + step.0 * i as f64, offset.1 + step.1 * i as f64))
            .collect()
    }

    #[test]
    fn exact_match_is_zero() {
        let gt = line(12, (0.1, 0.0), (0.0, 0.0));
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_half_unit() {
        // Offset (0.3, 0.4) at every frame: ADE = FDE = 0.5 exactly.
        let gt = line(12, (0.2, 0.1), (0.0, 0.0));
        let pred: Vec<Point> = gt.iter().map(|p| Point::new(p.x + 0.3, p.y + 0.4)).collect();
        assert!((ade(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
        assert!((fde(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn joint_translation_leaves_metrics_unchanged() {
        let mut rng = Rng::new(2);
        let gt: Vec<Point> =
            (0..12).map(|_| Point::new(rng.range(-5.0, 5.0), rng.range(-5.0, 5.0))).collect();
        let pred: Vec<Point> =
            (0..12).map(|_| Point::new(rng.range(-5.0, 5.0), rng.range(-5.0, 5.0))).collect();
        let shift = |pts: &[Point]| -> Vec<Point> {
            pts.iter().map(|p| Point::new(p.x + 17.5, p.y - 3.25)).collect()
        };
        let a = (ade(&pred, &gt).unwrap(), fde(&pred, &gt).unwrap());
        let b = (ade(&shift(&pred), &shift(&gt)).unwrap(), fde(&shift(&pred), &shift(&gt)).unwrap());
        assert!((a.0 - b.0).abs() < 1e-9);
        assert!((a.1 - b.1).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let gt = line(12, (0.1, 0.0), (0.0, 0.0));
        let short = line(11, (0.1, 0.0), (0.0, 0.0));
        assert!(matches!(ade(&short, &gt), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn best_of_k_single_sample_is_itself() {
        let gt = line(12, (0.1, 0.0), (0.0, 0.0));
        let pred: Vec<Point> = gt.iter().map(|p| Point::new(p.x + 0.3, p.y + 0.4)).collect();
        let (a, f) = best_of_k(&[pred.clone()], &gt).unwrap();
        assert_eq!(a, ade(&pred, &gt).unwrap());
        assert_eq!(f, fde(&pred, &gt).unwrap());
    }

    #[test]
    fn adding_samples_never_increases_minima() {
        let mut rng = Rng::new(7);
        let gt: Vec<Point> =
            (0..12).map(|_| Point::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0))).collect();
        let mut samples: Vec<Vec<Point>> = Vec::new();
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for _ in 0..10 {
            samples.push(
                (0..12).map(|_| Point::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0))).collect(),
            );
            let now = best_of_k(&samples, &gt).unwrap();
            assert!(now.0 <= prev.0 + 1e-15);
            assert!(now.1 <= prev.1 + 1e-15);
            prev = now;
        }
    }

    #[test]
    fn best_of_k_matches_brute_force_scan() {
        let mut rng = Rng::new(13);
        for _ in 0..50 {
            let gt: Vec<Point> =
                (0..12).map(|_| Point::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0))).collect();
            let samples: Vec<Vec<Point>> = (0..3)
                .map(|_| {
                    (0..12)
                        .map(|_| Point::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)))
                        .collect()
                })
                .collect();
            let (a, f) = best_of_k(&samples, &gt).unwrap();
            // Independent scan.
            let ades: Vec<f64> = samples.iter().map(|s| ade(s, &gt).unwrap()).collect();
            let fdes: Vec<f64> = samples.iter().map(|s| fde(s, &gt).unwrap()).collect();
            assert_eq!(a, ades.iter().cloned().fold(f64::INFINITY, f64::min));
            assert_eq!(f, fdes.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        let gt = line(12, (0.1, 0.0), (0.0, 0.0));
        assert!(matches!(best_of_k(&[], &gt), Err(EvalError::EmptySampleSet)));
    }

    #[test]
    fn cv_baseline_is_exact_on_uniform_motion() {
        let points = line(20, (0.25, -0.1), (3.0, 1.0));
        let traj = Trajectory::new(0, points, 8, 12);
        let pred = constant_velocity_baseline(&traj).unwrap();
        assert!(ade(&pred, traj.future()).unwrap() < 1e-12);
    }

    #[test]
    fn cv_baseline_stationary_stays_put() {
        let points = vec![Point::new(1.0, 2.0); 20];
        let traj = Trajectory::new(0, points, 8, 12);
        let pred = constant_velocity_baseline(&traj).unwrap();
        for p in pred {
            assert_eq!((p.x, p.y), (1.0, 2.0));
        }
    }

    #[test]
    fn cv_baseline_needs_two_observed() {
        let traj = Trajectory::new(0, line(13, (0.1, 0.0), (0.0, 0.0)), 1, 12);
        assert!(matches!(
            constant_velocity_baseline(&traj),
            Err(EvalError::TooFewObserved(1))
        ));
    }
}
