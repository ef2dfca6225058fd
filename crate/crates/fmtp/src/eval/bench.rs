//! Single-prediction latency benchmark.
//!
//! Times the compute path only (normalize, tokenize, one sampled future,
//! decode, denormalize); file I/O and dataset loading stay outside the
//! measured region. Runs single-threaded for timing fidelity.

use std::time::Instant;

use crate::data::Trajectory;
use crate::lm::LmModel;
use crate::vq::VqModel;

use super::{predict, PredictConfig};

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub n_trials: usize,
    pub k_samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub hardware: String,
    pub model_note: String,
}

/// Percentile by nearest-rank on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn latency_bench(
    vq: &VqModel<f32>,
    lm: &LmModel<f32>,
    trajectories: &[Trajectory],
    n_trials: usize,
    warmup: usize,
) -> LatencyReport {
    assert!(!trajectories.is_empty() && n_trials > 0);
    let cfg = PredictConfig { k_samples: 1, ..Default::default() };

    for i in 0..warmup {
        let traj = &trajectories[i % trajectories.len()];
        std::hint::black_box(predict(vq, lm, traj, &cfg));
    }

    let mut times_ms = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let traj = &trajectories[i % trajectories.len()];
        let start = Instant::now();
        std::hint::black_box(predict(vq, lm, traj, &cfg));
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());

    LatencyReport {
        n_trials,
        k_samples: 1,
        mean_ms,
        p50_ms: percentile(&times_ms, 0.50),
        p95_ms: percentile(&times_ms, 0.95),
        hardware: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        model_note: format!(
            "k={} n_k={} d_model={} layers={} heads={}",
            vq.config.k, vq.config.n_k, lm.config.d_model, lm.config.layers, lm.config.heads
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_ordering() {
        let sorted = vec![1.0, 2.0, 3.0, 4.0, 10.0];
        assert!(percentile(&sorted, 0.5) <= percentile(&sorted, 0.95));
        assert_eq!(percentile(&sorted, 1.0), 10.0);
    }
}
