//! Binary containers for trained parameters and tokenized datasets.
//!
//! Checkpoint layout (`FMCK`, version 1): magic, version byte, kind byte,
//! a kind-specific config block, then named parameter tensors with shape
//! headers and little-endian 32-bit float data. The codebook can be exported
//! standalone in the same container. Token files (`FMTK`) carry a header
//! (vocabulary size, o, p, count) followed by packed 16-bit token ids.

use std::io::{Read, Write};
use std::path::Path;

use crate::bytes::Reader;
use crate::lm::{LmConfig, LmModel, TokenSequence};
use crate::num::{ParamSet, Tensor};
use crate::vq::{VqConfig, VqModel};

const CKPT_MAGIC: &[u8; 4] = b"FMCK";
const TOKENS_MAGIC: &[u8; 4] = b"FMTK";
const VERSION: u8 = 1;

const KIND_VQ: u8 = 1;
const KIND_LM: u8 = 2;
const KIND_CODEBOOK: u8 = 3;

#[derive(Debug, Clone, thiserror::Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::sync::Arc<std::io::Error>,
    },
    #[error("bad checkpoint: {0}")]
    Bad(String),
}

impl CkptError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CkptError::Io { path: path.display().to_string(), source: std::sync::Arc::new(source) }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CkptError> {
    let mut f = std::fs::File::create(path).map_err(|e| CkptError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CkptError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CkptError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CkptError::io(path, e))?;
    Ok(bytes)
}

fn push_tensors(buf: &mut Vec<u8>, params: &ParamSet<f32>) {
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(r: &mut Reader) -> Result<ParamSet<f32>, CkptError> {
    let count = r.u32().map_err(CkptError::Bad)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16().map_err(CkptError::Bad)? as usize;
        let name = String::from_utf8(r.take(name_len).map_err(CkptError::Bad)?.to_vec())
            .map_err(|_| CkptError::Bad("parameter name is not utf-8".into()))?;
        let ndim = r.u8().map_err(CkptError::Bad)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32().map_err(CkptError::Bad)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32().map_err(CkptError::Bad)?);
        }
        params.add(name, Tensor::new(shape, data));
    }
    Ok(params)
}

fn header(kind: u8) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(VERSION);
    buf.push(kind);
    buf
}

fn check_header(r: &mut Reader, expect_kind: u8) -> Result<(), CkptError> {
    if r.take(4).map_err(CkptError::Bad)? != CKPT_MAGIC {
        return Err(CkptError::Bad("wrong magic (not a checkpoint)".into()));
    }
    let version = r.u8().map_err(CkptError::Bad)?;
    if version != VERSION {
        return Err(CkptError::Bad(format!("unsupported version {version}")));
    }
    let kind = r.u8().map_err(CkptError::Bad)?;
    if kind != expect_kind {
        return Err(CkptError::Bad(format!(
            "checkpoint kind {kind} does not match expected {expect_kind}"
        )));
    }
    Ok(())
}

pub fn save_vq(path: &Path, model: &VqModel<f32>) -> Result<(), CkptError> {
    let mut buf = header(KIND_VQ);
    let c = &model.config;
    for v in [c.k, c.n_k, c.window, c.hidden, c.attn_heads, c.t_obs, c.t_pred] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.beta.to_le_bytes());
    push_tensors(&mut buf, &model.params);
    write_file(path, &buf)
}

pub fn load_vq(path: &Path) -> Result<VqModel<f32>, CkptError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    check_header(&mut r, KIND_VQ)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32().map_err(CkptError::Bad)? as usize;
    }
    let beta = r.f64().map_err(CkptError::Bad)?;
    let config = VqConfig {
        k: dims[0],
        n_k: dims[1],
        window: dims[2],
        hidden: dims[3],
        attn_heads: dims[4],
        t_obs: dims[5],
        t_pred: dims[6],
        beta,
    };
    config.validate().map_err(CkptError::Bad)?;
    let params = read_tensors(&mut r)?;
    VqModel::from_params(config, params).map_err(CkptError::Bad)
}

pub fn save_lm(path: &Path, model: &LmModel<f32>) -> Result<(), CkptError> {
    let mut buf = header(KIND_LM);
    let c = &model.config;
    for v in [c.vocab, c.d_model, c.heads, c.layers, c.ff, c.max_len] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    push_tensors(&mut buf, &model.params);
    write_file(path, &buf)
}

pub fn load_lm(path: &Path) -> Result<LmModel<f32>, CkptError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    check_header(&mut r, KIND_LM)?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32().map_err(CkptError::Bad)? as usize;
    }
    let config = LmConfig {
        vocab: dims[0],
        d_model: dims[1],
        heads: dims[2],
        layers: dims[3],
        ff: dims[4],
        max_len: dims[5],
    };
    config.validate().map_err(CkptError::Bad)?;
    let params = read_tensors(&mut r)?;
    LmModel::from_params(config, params).map_err(CkptError::Bad)
}

/// Standalone memory-array export in the shared container.
pub fn save_codebook(path: &Path, model: &VqModel<f32>) -> Result<(), CkptError> {
    let mut buf = header(KIND_CODEBOOK);
    buf.extend_from_slice(&(model.config.k as u32).to_le_bytes());
    buf.extend_from_slice(&(model.config.n_k as u32).to_le_bytes());
    let mut params = ParamSet::new();
    params.add("memory.entries", model.memory().entries);
    push_tensors(&mut buf, &params);
    write_file(path, &buf)
}

pub fn load_codebook(path: &Path) -> Result<Tensor<f32>, CkptError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    check_header(&mut r, KIND_CODEBOOK)?;
    let k = r.u32().map_err(CkptError::Bad)? as usize;
    let n_k = r.u32().map_err(CkptError::Bad)? as usize;
    let params = read_tensors(&mut r)?;
    let handle = params
        .by_name("memory.entries")
        .ok_or_else(|| CkptError::Bad("codebook entries missing".into()))?;
    let entries = params.tensor(handle).clone();
    if entries.shape() != [k, n_k] {
        return Err(CkptError::Bad("codebook shape does not match header".into()));
    }
    Ok(entries)
}

/// Writes tokenized sequences with their vocabulary size.
pub fn save_tokens(path: &Path, vocab: usize, seqs: &[TokenSequence]) -> Result<(), CkptError> {
    assert!(vocab <= u16::MAX as usize + 1, "token file packs 16-bit ids");
    let (o, p) = seqs.first().map(|s| (s.o, s.p)).unwrap_or((0, 0));
    let mut buf = Vec::new();
    buf.extend_from_slice(TOKENS_MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(o as u16).to_le_bytes());
    buf.extend_from_slice(&(p as u16).to_le_bytes());
    buf.extend_from_slice(&(seqs.len() as u32).to_le_bytes());
    for seq in seqs {
        debug_assert!(seq.o == o && seq.p == p);
        for &t in &seq.tokens {
            debug_assert!(t < vocab);
            buf.extend_from_slice(&(t as u16).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

pub fn load_tokens(path: &Path) -> Result<(usize, Vec<TokenSequence>), CkptError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4).map_err(CkptError::Bad)? != TOKENS_MAGIC {
        return Err(CkptError::Bad("wrong magic (not a token file)".into()));
    }
    let version = r.u8().map_err(CkptError::Bad)?;
    if version != VERSION {
        return Err(CkptError::Bad(format!("unsupported version {version}")));
    }
    let vocab = r.u32().map_err(CkptError::Bad)? as usize;
    let o = r.u16().map_err(CkptError::Bad)? as usize;
    let p = r.u16().map_err(CkptError::Bad)? as usize;
    let count = r.u32().map_err(CkptError::Bad)? as usize;
    let mut seqs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tokens = Vec::with_capacity(o + p);
        for _ in 0..o + p {
            let t = r.u16().map_err(CkptError::Bad)? as usize;
            if t >= vocab {
                return Err(CkptError::Bad(format!("token {t} out of vocabulary {vocab}")));
            }
            tokens.push(t);
        }
        seqs.push(TokenSequence::new(tokens, o, p));
    }
    if !r.is_at_end() {
        return Err(CkptError::Bad("trailing bytes after token data".into()));
    }
    Ok((vocab, seqs))
}
