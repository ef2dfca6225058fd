//! Whitespace-separated trajectory text ingestion and sliding-window track
//! extraction.
//!
//! Input rows are `frame_id agent_id x y`. Observations are grouped by agent
//! and ordered by frame; a per-agent run is contiguous while successive
//! frame ids differ by exactly the frame stride (inferred from the file as
//! the most common positive delta unless given explicitly).

use std::collections::BTreeMap;
use std::path::Path;

use super::{DataError, Point, Trajectory};

#[derive(Debug, Clone)]
pub struct AgentTrack {
    pub agent_id: i64,
    pub frames: Vec<i64>,
    pub points: Vec<Point>,
}

/// Observations grouped by agent, plus the frame spacing used for
/// contiguity checks.
#[derive(Debug, Clone)]
pub struct RawObservations {
    pub agents: Vec<AgentTrack>,
    pub frame_stride: i64,
}

fn parse_number(token: &str, line: usize, what: &str) -> Result<f64, DataError> {
    token.parse::<f64>().map_err(|_| DataError::Parse {
        line,
        detail: format!("{what} `{token}` is not a number"),
    })
}

fn parse_id(token: &str, line: usize, what: &str) -> Result<i64, DataError> {
    let v = parse_number(token, line, what)?;
    if v.fract() != 0.0 {
        return Err(DataError::Parse { line, detail: format!("{what} `{token}` is not integral") });
    }
    Ok(v as i64)
}

/// Loads `frame_id agent_id x y` rows. `frame_stride` of `None` accepts the
/// file's native spacing (the most common positive frame delta).
pub fn load_ethucy_text(
    path: &Path,
    frame_stride: Option<i64>,
) -> Result<RawObservations, DataError> {
    let content = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut by_agent: BTreeMap<i64, Vec<(i64, Point)>> = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                line,
                detail: format!("expected 4 fields `frame_id agent_id x y`, got {}", fields.len()),
            });
        }
        let frame = parse_id(fields[0], line, "frame_id")?;
        let agent = parse_id(fields[1], line, "agent_id")?;
        let x = parse_number(fields[2], line, "x")?;
        let y = parse_number(fields[3], line, "y")?;
        by_agent.entry(agent).or_default().push((frame, Point::new(x, y)));
    }

    let mut agents = Vec::with_capacity(by_agent.len());
    let mut delta_counts: BTreeMap<i64, usize> = BTreeMap::new();
    for (agent_id, mut obs) in by_agent {
        obs.sort_by_key(|(frame, _)| *frame);
        obs.dedup_by_key(|(frame, _)| *frame);
        for pair in obs.windows(2) {
            let d = pair[1].0 - pair[0].0;
            if d > 0 {
                *delta_counts.entry(d).or_default() += 1;
            }
        }
        let (frames, points) = obs.into_iter().unzip();
        agents.push(AgentTrack { agent_id, frames, points });
    }

    let inferred = delta_counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&d, _)| d)
        .unwrap_or(1);
    Ok(RawObservations { agents, frame_stride: frame_stride.unwrap_or(inferred) })
}

/// Slides a window of `t_obs + t_pred` observations over every maximal
/// contiguous per-agent run, advancing by `stride` observations. Runs
/// shorter than the window contribute nothing; a window never spans a frame
/// gap.
pub fn extract_tracks(
    obs: &RawObservations,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Vec<Trajectory> {
    let window = t_obs + t_pred;
    let stride = stride.max(1);
    let mut out = Vec::new();
    for agent in &obs.agents {
        // Split into contiguous runs.
        let mut run_start = 0;
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for i in 1..agent.frames.len() {
            if agent.frames[i] - agent.frames[i - 1] != obs.frame_stride {
                runs.push((run_start, i));
                run_start = i;
            }
        }
        runs.push((run_start, agent.frames.len()));

        for (start, end) in runs {
            let len = end - start;
            if len < window {
                continue;
            }
            let mut w = 0;
            while w + window <= len {
                let slice = &agent.points[start + w..start + w + window];
                out.push(Trajectory::new(agent.agent_id, slice.to_vec(), t_obs, t_pred));
                w += stride;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_rows_one_agent() {
        let f = write_tmp("0 1 0.0 0.0\n10 1 1.0 0.0\n");
        let obs = load_ethucy_text(f.path(), None).unwrap();
        assert_eq!(obs.agents.len(), 1);
        assert_eq!(obs.agents[0].agent_id, 1);
        assert_eq!(obs.agents[0].points.len(), 2);
        assert_eq!(obs.frame_stride, 10);
    }

    #[test]
    fn empty_file_is_empty_result() {
        let f = write_tmp("");
        let obs = load_ethucy_text(f.path(), None).unwrap();
        assert!(obs.agents.is_empty());
        assert!(extract_tracks(&obs, 8, 12, 1).is_empty());
    }

    #[test]
    fn malformed_row_names_line() {
        let f = write_tmp("0 1 x y\n");
        match load_ethucy_text(f.path(), None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn float_formatted_ids_accepted() {
        let f = write_tmp("840.0 3.0 1.5 -2.5\n");
        let obs = load_ethucy_text(f.path(), None).unwrap();
        assert_eq!(obs.agents[0].agent_id, 3);
        assert_eq!(obs.agents[0].frames[0], 840);
    }

    fn run_of(agent: i64, frames: &[i64]) -> String {
        frames
            .iter()
            .map(|f| format!("{f} {agent} {} {}\n", *f as f64 * 0.1, 0.0))
            .collect()
    }

    #[test]
    fn exactly_twenty_frames_gives_one_trajectory() {
        let frames: Vec<i64> = (0..20).collect();
        let f = write_tmp(&run_of(1, &frames));
        let obs = load_ethucy_text(f.path(), None).unwrap();
        assert_eq!(extract_tracks(&obs, 8, 12, 1).len(), 1);
    }

    #[test]
    fn twenty_one_frames_stride_one_gives_two() {
        let frames: Vec<i64> = (0..21).collect();
        let f = write_tmp(&run_of(1, &frames));
        let obs = load_ethucy_text(f.path(), None).unwrap();
        assert_eq!(extract_tracks(&obs, 8, 12, 1).len(), 2);
    }

    #[test]
    fn window_never_spans_a_gap() {
        // 25 observations at stride 1 with a gap after the 12th: two runs of
        // 12 and 13, neither long enough for a 20-frame window.
        let mut frames: Vec<i64> = (0..12).collect();
        frames.extend(14..27);
        let f = write_tmp(&run_of(1, &frames));
        let obs = load_ethucy_text(f.path(), None).unwrap();
        assert_eq!(obs.frame_stride, 1);
        assert!(extract_tracks(&obs, 8, 12, 1).is_empty());

        // Shifting the gap to leave a 20-long run yields exactly that window.
        let mut frames: Vec<i64> = (0..20).collect();
        frames.extend(25..30);
        let f = write_tmp(&run_of(1, &frames));
        let obs = load_ethucy_text(f.path(), None).unwrap();
        let tracks = extract_tracks(&obs, 8, 12, 1);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].points.len(), 20);
    }

    #[test]
    fn explicit_stride_overrides_inference() {
        let frames: Vec<i64> = (0..40).step_by(2).collect();
        let f = write_tmp(&run_of(2, &frames));
        let obs = load_ethucy_text(f.path(), Some(2)).unwrap();
        assert_eq!(extract_tracks(&obs, 8, 12, 1).len(), 1);
        // A stride of 1 treats every observation as a gap boundary.
        let obs = load_ethucy_text(f.path(), Some(1)).unwrap();
        assert!(extract_tracks(&obs, 8, 12, 1).is_empty());
    }
}
