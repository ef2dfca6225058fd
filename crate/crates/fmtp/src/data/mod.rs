//! Trajectory data model: 2D agent tracks split into observed and future
//! frames, coordinate normalization, text ingestion, a synthetic corpus
//! generator, and a binary dataset cache.

mod cache;
mod ethucy;
mod synth;

pub use cache::{read_corpus, write_corpus};
pub use ethucy::{extract_tracks, load_ethucy_text, RawObservations};
pub use synth::{synth_generate, PatternMix, SynthConfig};

#[derive(Debug, Clone, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::sync::Arc<std::io::Error>,
    },
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("bad dataset cache: {0}")]
    BadCache(String),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source: std::sync::Arc::new(source) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// The eight parameterized motion families of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionPattern {
    ConstantVelocity,
    ConstantAcceleration,
    LeftTurn,
    RightTurn,
    SinusoidalWeave,
    StopAndGo,
    UTurn,
    StationaryJitter,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 8] = [
        MotionPattern::ConstantVelocity,
        MotionPattern::ConstantAcceleration,
        MotionPattern::LeftTurn,
        MotionPattern::RightTurn,
        MotionPattern::SinusoidalWeave,
        MotionPattern::StopAndGo,
        MotionPattern::UTurn,
        MotionPattern::StationaryJitter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionPattern::ConstantVelocity => "constant_velocity",
            MotionPattern::ConstantAcceleration => "constant_acceleration",
            MotionPattern::LeftTurn => "left_turn",
            MotionPattern::RightTurn => "right_turn",
            MotionPattern::SinusoidalWeave => "sinusoidal_weave",
            MotionPattern::StopAndGo => "stop_and_go",
            MotionPattern::UTurn => "u_turn",
            MotionPattern::StationaryJitter => "stationary_jitter",
        }
    }

    pub(crate) fn code(self) -> u8 {
        MotionPattern::ALL.iter().position(|&p| p == self).unwrap() as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        MotionPattern::ALL.get(code as usize).copied()
    }
}

/// One agent's ordered 2D points, the first `t_obs` observed and the last
/// `t_pred` to be predicted. Coordinates are scene units: meters for real
/// data, dimensionless for synthetic.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub agent_id: i64,
    pub points: Vec<Point>,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Generator label for synthetic data; absent for ingested tracks.
    pub pattern: Option<MotionPattern>,
}

impl Trajectory {
    pub fn new(agent_id: i64, points: Vec<Point>, t_obs: usize, t_pred: usize) -> Self {
        assert_eq!(points.len(), t_obs + t_pred, "trajectory length must be t_obs + t_pred");
        Trajectory { agent_id, points, t_obs, t_pred, pattern: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn observed(&self) -> &[Point] {
        &self.points[..self.t_obs]
    }

    pub fn future(&self) -> &[Point] {
        &self.points[self.t_obs..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Trajectories of one split; immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Train/val/test triple sharing (t_obs, t_pred).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn t_obs(&self) -> usize {
        self.any().map(|t| t.t_obs).unwrap_or(0)
    }

    pub fn t_pred(&self) -> usize {
        self.any().map(|t| t.t_pred).unwrap_or(0)
    }

    fn any(&self) -> Option<&Trajectory> {
        self.train
            .trajectories
            .first()
            .or(self.val.trajectories.first())
            .or(self.test.trajectories.first())
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Which coordinate invariances to remove before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationMode {
    /// Last observed point mapped to the origin.
    Translation,
    /// Translation plus rotation aligning the final observed velocity
    /// with +x; falls back to translation alone for zero velocity.
    TranslationRotation,
}

/// Invertible record of the transform applied to one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub offset: Point,
    /// Rotation angle applied (coordinates were rotated by -angle); `None`
    /// when rotation was not applied.
    pub rotation: Option<f64>,
    /// True when rotation was requested but the final observed velocity was
    /// zero, so only translation was applied.
    pub rotation_fell_back: bool,
}

/// Maps the last observed point to the origin and, in rotation mode, aligns
/// the final observed velocity with +x.
pub fn normalize(traj: &Trajectory, mode: NormalizationMode) -> (Trajectory, NormalizationTransform) {
    let anchor = traj.points[traj.t_obs - 1];
    let mut rotation = None;
    let mut fell_back = false;
    if mode == NormalizationMode::TranslationRotation {
        if traj.t_obs >= 2 {
            let prev = traj.points[traj.t_obs - 2];
            let vx = anchor.x - prev.x;
            let vy = anchor.y - prev.y;
            if vx.hypot(vy) > 0.0 {
                rotation = Some(vy.atan2(vx));
            } else {
                fell_back = true;
            }
        } else {
            fell_back = true;
        }
    }
    let (sin, cos) = rotation.map(|a| a.sin_cos()).unwrap_or((0.0, 1.0));
    let points = traj
        .points
        .iter()
        .map(|p| {
            let dx = p.x - anchor.x;
            let dy = p.y - anchor.y;
            // Rotate by -angle.
            Point::new(dx * cos + dy * sin, -dx * sin + dy * cos)
        })
        .collect();
    let out = Trajectory { points, ..traj.clone() };
    (out, NormalizationTransform { offset: anchor, rotation, rotation_fell_back: fell_back })
}

/// Maps points back to original coordinates.
pub fn denormalize_points(points: &[Point], t: &NormalizationTransform) -> Vec<Point> {
    let (sin, cos) = t.rotation.map(|a| a.sin_cos()).unwrap_or((0.0, 1.0));
    points
        .iter()
        .map(|p| {
            // Rotate by +angle, then translate back.
            let x = p.x * cos - p.y * sin;
            let y = p.x * sin + p.y * cos;
            Point::new(x + t.offset.x, y + t.offset.y)
        })
        .collect()
}

pub fn denormalize(traj: &Trajectory, t: &NormalizationTransform) -> Trajectory {
    Trajectory { points: denormalize_points(&traj.points, t), ..traj.clone() }
}
