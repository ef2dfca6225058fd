//! Synthetic motion-pattern corpus.
//!
//! Desk-scale substitute for full trajectory datasets: eight parameterized
//! motion families with per-trajectory parameters drawn from a seeded PRNG
//! and per-point Gaussian noise. Regeneration from the same seed and config
//! is bitwise identical.

use super::{Corpus, DataError, Dataset, MotionPattern, Point, Split, Trajectory};
use crate::num::Rng;

/// Pattern weights; must sum to 1.
#[derive(Debug, Clone)]
pub struct PatternMix {
    entries: Vec<(MotionPattern, f64)>,
}

impl PatternMix {
    pub fn new(entries: Vec<(MotionPattern, f64)>) -> Result<Self, DataError> {
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if entries.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!(
                "pattern weights must sum to 1, got {total}"
            )));
        }
        if entries.iter().any(|(_, w)| *w < 0.0) {
            return Err(DataError::Invalid("pattern weights must be nonnegative".into()));
        }
        Ok(PatternMix { entries })
    }

    /// All eight patterns, equally weighted.
    pub fn uniform() -> Self {
        let w = 1.0 / MotionPattern::ALL.len() as f64;
        PatternMix { entries: MotionPattern::ALL.iter().map(|&p| (p, w)).collect() }
    }

    pub fn single(pattern: MotionPattern) -> Self {
        PatternMix { entries: vec![(pattern, 1.0)] }
    }

    fn draw(&self, rng: &mut Rng) -> MotionPattern {
        let weights: Vec<f64> = self.entries.iter().map(|(_, w)| *w).collect();
        self.entries[rng.weighted(&weights)].0
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Per-point Gaussian noise sigma in scene units.
    pub noise_sigma: f64,
    pub mix: PatternMix,
    /// Fractions of `n` assigned to train and val; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 4000,
            t_obs: 8,
            t_pred: 12,
            noise_sigma: 0.01,
            mix: PatternMix::uniform(),
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

/// Generates `config.n` trajectories and splits them train/val/test in
/// generation order.
pub fn synth_generate(rng: &mut Rng, config: &SynthConfig) -> Corpus {
    let total = config.t_obs + config.t_pred;
    let mut all = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let pattern = config.mix.draw(rng);
        let mut points = generate_pattern(rng, pattern, total);
        if config.noise_sigma > 0.0 {
            for p in &mut points {
                p.x += config.noise_sigma * rng.normal();
                p.y += config.noise_sigma * rng.normal();
            }
        }
        let mut traj = Trajectory::new(i as i64, points, config.t_obs, config.t_pred);
        traj.pattern = Some(pattern);
        all.push(traj);
    }

    let n_train = (config.n as f64 * config.train_frac).floor() as usize;
    let n_val = (config.n as f64 * config.val_frac).floor() as usize;
    let rest = all.split_off(n_train.min(all.len()));
    let (val, test): (Vec<_>, Vec<_>) = {
        let mut rest = rest;
        let test = rest.split_off(n_val.min(rest.len()));
        (rest, test)
    };
    Corpus {
        train: Dataset { trajectories: all, split: Split::Train },
        val: Dataset { trajectories: val, split: Split::Val },
        test: Dataset { trajectories: test, split: Split::Test },
    }
}

fn pick(rng: &mut Rng, options: &[f64]) -> f64 {
    options[rng.below(options.len())]
}

// Pattern parameters are drawn from discrete palettes with a small
// continuous jitter. Start positions remain fully continuous (translation
// normalization removes them); the palettes keep the corpus manifold
// commensurate with a desk-scale memory array while leaving pattern, heading,
// speed, and phase to be inferred from the observed window.
fn generate_pattern(rng: &mut Rng, pattern: MotionPattern, total: usize) -> Vec<Point> {
    let x0 = rng.range(-3.0, 3.0);
    let y0 = rng.range(-3.0, 3.0);
    let heading = rng.below(6) as f64 * (std::f64::consts::TAU / 6.0) + rng.range(-0.02, 0.02);
    let speed = pick(rng, &[0.10, 0.18]) + rng.range(-0.003, 0.003);

    match pattern {
        MotionPattern::ConstantVelocity => {
            let (dy, dx) = heading.sin_cos();
            (0..total)
                .map(|t| Point::new(x0 + speed * dx * t as f64, y0 + speed * dy * t as f64))
                .collect()
        }
        MotionPattern::ConstantAcceleration => {
            let accel =
                pick(rng, &[-0.35, 0.35, 0.75]) * rng.range(0.9, 1.1) * speed / total as f64;
            let (dy, dx) = heading.sin_cos();
            let mut pos = Point::new(x0, y0);
            let mut out = vec![pos];
            for t in 0..total - 1 {
                let v = speed + accel * t as f64;
                pos = Point::new(pos.x + v * dx, pos.y + v * dy);
                out.push(pos);
            }
            out
        }
        MotionPattern::LeftTurn | MotionPattern::RightTurn => {
            let mut omega = pick(rng, &[0.06, 0.09, 0.12]) * rng.range(0.95, 1.05);
            if pattern == MotionPattern::RightTurn {
                omega = -omega;
            }
            turning_path(Point::new(x0, y0), heading, speed, total, |_| omega)
        }
        MotionPattern::SinusoidalWeave => {
            let amp = pick(rng, &[0.2, 0.35, 0.5]) * rng.range(0.95, 1.05);
            let freq = pick(rng, &[0.08, 0.12]);
            let phase = pick(rng, &[0.0, 0.25, 0.5, 0.75]) * std::f64::consts::TAU
                + rng.range(-0.05, 0.05);
            let (dy, dx) = heading.sin_cos();
            (0..total)
                .map(|t| {
                    let along = speed * t as f64;
                    let lateral = amp * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
                    Point::new(x0 + along * dx - lateral * dy, y0 + along * dy + lateral * dx)
                })
                .collect()
        }
        MotionPattern::StopAndGo => {
            let go = 5 + 2 * rng.below(3); // {5, 7, 9} moving frames
            let stop = 3 + 2 * rng.below(2); // {3, 5} paused frames
            let (dy, dx) = heading.sin_cos();
            let mut pos = Point::new(x0, y0);
            let mut out = vec![pos];
            for t in 0..total - 1 {
                if t % (go + stop) < go {
                    pos = Point::new(pos.x + speed * dx, pos.y + speed * dy);
                }
                out.push(pos);
            }
            out
        }
        MotionPattern::UTurn => {
            let straight = 5 + 2 * rng.below(2); // {5, 7} frames before the turn
            let turn_len = 4 + 2 * rng.below(3); // {4, 6, 8} frames turning
            let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
            let omega = sign * std::f64::consts::PI / turn_len as f64;
            turning_path(Point::new(x0, y0), heading, speed, total, |t| {
                if t >= straight && t < straight + turn_len {
                    omega
                } else {
                    0.0
                }
            })
        }
        MotionPattern::StationaryJitter => {
            let amp = pick(rng, &[0.005, 0.012]);
            (0..total)
                .map(|_| Point::new(x0 + amp * rng.normal(), y0 + amp * rng.normal()))
                .collect()
        }
    }
}

fn turning_path(
    start: Point,
    heading0: f64,
    speed: f64,
    total: usize,
    omega_at: impl Fn(usize) -> f64,
) -> Vec<Point> {
    let mut heading = heading0;
    let mut pos = start;
    let mut out = vec![pos];
    for t in 0..total - 1 {
        heading += omega_at(t);
        let (dy, dx) = heading.sin_cos();
        pos = Point::new(pos.x + speed * dx, pos.y + speed * dy);
        out.push(pos);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_velocity_without_noise_has_equal_displacements() {
        let mut rng = Rng::new(5);
        let config = SynthConfig {
            n: 20,
            noise_sigma: 0.0,
            mix: PatternMix::single(MotionPattern::ConstantVelocity),
            ..Default::default()
        };
        let corpus = synth_generate(&mut rng, &config);
        for traj in &corpus.train.trajectories {
            let first = traj.points[1].dist(traj.points[0]);
            for pair in traj.points.windows(2) {
                let d = pair[1].dist(pair[0]);
                assert!((d - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_n_gives_empty_corpus() {
        let mut rng = Rng::new(5);
        let corpus = synth_generate(&mut rng, &SynthConfig { n: 0, ..Default::default() });
        assert_eq!(corpus.total(), 0);
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let config = SynthConfig { n: 4000, ..Default::default() };
        let run = || {
            let mut rng = Rng::new(77);
            synth_generate(&mut rng, &config)
        };
        let a = run();
        let b = run();
        assert_eq!(a.total(), 4000);
        for (ta, tb) in a
            .train
            .trajectories
            .iter()
            .chain(&a.val.trajectories)
            .chain(&a.test.trajectories)
            .zip(b.train.trajectories.iter().chain(&b.val.trajectories).chain(&b.test.trajectories))
        {
            assert_eq!(ta.pattern, tb.pattern);
            for (pa, pb) in ta.points.iter().zip(&tb.points) {
                assert_eq!(pa.x.to_bits(), pb.x.to_bits());
                assert_eq!(pa.y.to_bits(), pb.y.to_bits());
            }
        }
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let mut rng = Rng::new(5);
        let corpus = synth_generate(&mut rng, &SynthConfig { n: 4000, ..Default::default() });
        assert_eq!(corpus.train.len(), 3200);
        assert_eq!(corpus.val.len(), 400);
        assert_eq!(corpus.test.len(), 400);
    }

    #[test]
    fn bad_mix_rejected() {
        assert!(PatternMix::new(vec![(MotionPattern::UTurn, 0.5)]).is_err());
        assert!(PatternMix::new(vec![]).is_err());
    }

    #[test]
    fn all_patterns_appear_in_uniform_mix() {
        let mut rng = Rng::new(9);
        let corpus = synth_generate(&mut rng, &SynthConfig { n: 800, ..Default::default() });
        for pattern in MotionPattern::ALL {
            assert!(
                corpus.train.trajectories.iter().any(|t| t.pattern == Some(pattern)),
                "{} missing",
                pattern.name()
            );
        }
    }
}
