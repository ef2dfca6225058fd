//! Binary dataset cache.
//!
//! Layout: 4-byte magic `FMDS`, version byte, t_obs u16, t_pred u16,
//! trajectory count u32, then per trajectory a split byte, a pattern byte
//! (255 = none), the agent id as i64, and the coordinates as little-endian
//! 32-bit floats in (x, y) frame order. All integers little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Corpus, DataError, Dataset, MotionPattern, Point, Split, Trajectory};

const MAGIC: &[u8; 4] = b"FMDS";
const VERSION: u8 = 1;

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    let t_obs = corpus.t_obs() as u16;
    let t_pred = corpus.t_pred() as u16;
    buf.extend_from_slice(&t_obs.to_le_bytes());
    buf.extend_from_slice(&t_pred.to_le_bytes());
    buf.extend_from_slice(&(corpus.total() as u32).to_le_bytes());
    for dataset in [&corpus.train, &corpus.val, &corpus.test] {
        for traj in &dataset.trajectories {
            buf.push(dataset.split.code());
            buf.push(traj.pattern.map(MotionPattern::code).unwrap_or(255));
            buf.extend_from_slice(&traj.agent_id.to_le_bytes());
            for p in &traj.points {
                buf.extend_from_slice(&(p.x as f32).to_le_bytes());
                buf.extend_from_slice(&(p.y as f32).to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    file.write_all(&buf).map_err(|e| DataError::io(path, e))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::io(path, e))?;
    let mut r = crate::bytes::Reader::new(&bytes);
    let bad = DataError::BadCache;

    if r.take(4).map_err(bad)? != MAGIC {
        return Err(DataError::BadCache("wrong magic (not a dataset cache)".into()));
    }
    let version = r.u8().map_err(bad)?;
    if version != VERSION {
        return Err(DataError::BadCache(format!("unsupported version {version}")));
    }
    let t_obs = r.u16().map_err(bad)? as usize;
    let t_pred = r.u16().map_err(bad)? as usize;
    let count = r.u32().map_err(bad)? as usize;

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for _ in 0..count {
        let split = Split::from_code(r.u8().map_err(bad)?)
            .ok_or_else(|| DataError::BadCache("bad split byte".into()))?;
        let pattern_code = r.u8().map_err(bad)?;
        let pattern =
            if pattern_code == 255 { None } else { MotionPattern::from_code(pattern_code) };
        let agent_id = r.i64().map_err(bad)?;
        let mut points = Vec::with_capacity(t_obs + t_pred);
        for _ in 0..t_obs + t_pred {
            let x = r.f32().map_err(bad)? as f64;
            let y = r.f32().map_err(bad)? as f64;
            points.push(Point::new(x, y));
        }
        let mut traj = Trajectory::new(agent_id, points, t_obs, t_pred);
        traj.pattern = pattern;
        match split {
            Split::Train => train.push(traj),
            Split::Val => val.push(traj),
            Split::Test => test.push(traj),
        }
    }
    Ok(Corpus {
        train: Dataset { trajectories: train, split: Split::Train },
        val: Dataset { trajectories: val, split: Split::Val },
        test: Dataset { trajectories: test, split: Split::Test },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::num::Rng;

    #[test]
    fn cache_round_trip_preserves_f32_coordinates() {
        let mut rng = Rng::new(4);
        let corpus = synth_generate(&mut rng, &SynthConfig { n: 50, ..Default::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.fmds");
        write_corpus(&path, &corpus).unwrap();
        let loaded = read_corpus(&path).unwrap();
        assert_eq!(loaded.train.len(), corpus.train.len());
        assert_eq!(loaded.val.len(), corpus.val.len());
        assert_eq!(loaded.test.len(), corpus.test.len());
        for (a, b) in corpus.train.trajectories.iter().zip(&loaded.train.trajectories) {
            assert_eq!(a.agent_id, b.agent_id);
            assert_eq!(a.pattern, b.pattern);
            for (pa, pb) in a.points.iter().zip(&b.points) {
                assert_eq!(pa.x as f32, pb.x as f32);
                assert_eq!(pa.y as f32, pb.y as f32);
            }
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.fmds");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_corpus(&path), Err(DataError::BadCache(_))));
    }
}
