//! Reasoning engine over memory indices: a small transformer with a
//! semi-causal (prefix) attention mask, trained to maximize the likelihood
//! of future token sequences, plus autoregressive sampling.
//!
//! The semi-causal mask makes observed-prefix keys visible to every query
//! while future keys stay causal, so the future sequence never affects the
//! inference over the prefix. A fully causal variant exists for the
//! convergence ablation.

pub mod infer;
pub mod train;

pub use infer::{sample_future, sequence_log_prob, Decoder, SampleConfig};
pub use train::{train_lm, LmTrainConfig, LmTrainRecord};

use crate::num::{Bound, NumError, ParamHandle, ParamSet, Rng, Scalar, Tape, Var};

/// Indices into the memory array: an observed prefix of length `o` followed
/// by a future suffix of length `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub o: usize,
    pub p: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, o: usize, p: usize) -> Self {
        assert_eq!(tokens.len(), o + p, "token sequence length must be o + p");
        TokenSequence { tokens, o, p }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn observed(&self) -> &[usize] {
        &self.tokens[..self.o]
    }

    pub fn future(&self) -> &[usize] {
        &self.tokens[self.o..]
    }
}

/// Mask variant: the semi-causal prefix mask or the fully causal ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    SemiCausal,
    Causal,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::SemiCausal => "semi-causal",
            MaskKind::Causal => "causal",
        }
    }
}

/// Boolean attention mask: `allowed[i*size + j]` lets query `i` attend key
/// `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Prefix mask over `o` observed and `p` future positions: observed keys
    /// (j < o) are visible to every query; future keys only at and after
    /// their own position (i >= j). Requires `o >= 1` so row 0 sees key 0.
    pub fn semi_causal(o: usize, p: usize) -> Result<Self, NumError> {
        if o == 0 {
            return Err(NumError::ShapeMismatch {
                op: "build_mask",
                detail: "observed prefix length must be at least 1".into(),
            });
        }
        let size = o + p;
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allowed[i * size + j] = j < o || i >= j;
            }
        }
        Ok(AttentionMask { size, allowed })
    }

    /// Fully causal: allowed iff i >= j.
    pub fn causal(size: usize) -> Self {
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            for j in 0..=i {
                allowed[i * size + j] = true;
            }
        }
        AttentionMask { size, allowed }
    }

    /// Builds `kind` over the first `len` positions of a sequence whose
    /// observed prefix has length `o`. Truncating a mask to its top-left
    /// corner equals building it at the smaller size, so teacher-forced
    /// passes over `o + p - 1` inputs use this directly.
    pub fn for_prefix(kind: MaskKind, o: usize, len: usize) -> Result<Self, NumError> {
        match kind {
            MaskKind::SemiCausal if len <= o => AttentionMask::semi_causal(len, 0),
            MaskKind::SemiCausal => AttentionMask::semi_causal(o, len - o),
            MaskKind::Causal => Ok(AttentionMask::causal(len)),
        }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    /// Output vocabulary == memory array size.
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width.
    pub ff: usize,
    /// Positional table size; the longest sequence the model accepts.
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { vocab: 64, d_model: 64, heads: 4, layers: 3, ff: 128, max_len: 10 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "d_model {} must be divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.vocab == 0 || self.layers == 0 || self.max_len == 0 {
            return Err("vocab, layers, and max_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadHandles {
    wq: ParamHandle,
    wk: ParamHandle,
    wv: ParamHandle,
    wo: ParamHandle,
}

#[derive(Debug, Clone)]
struct BlockHandles {
    heads: Vec<HeadHandles>,
    ln1_gain: ParamHandle,
    ln1_bias: ParamHandle,
    ff_w1: ParamHandle,
    ff_b1: ParamHandle,
    ff_w2: ParamHandle,
    ff_b2: ParamHandle,
    ln2_gain: ParamHandle,
    ln2_bias: ParamHandle,
}

/// Token/positional embeddings, post-norm transformer blocks, and the output
/// projection back to the vocabulary.
#[derive(Debug, Clone)]
pub struct LmModel<T> {
    pub config: LmConfig,
    pub params: ParamSet<T>,
    tok_emb: ParamHandle,
    pos_emb: ParamHandle,
    blocks: Vec<BlockHandles>,
    out_proj: ParamHandle,
}

impl<T: Scalar> LmModel<T> {
    pub fn new(config: LmConfig, rng: &mut Rng) -> Self {
        config.validate().expect("invalid lm config");
        let d = config.d_model;
        let dk = config.head_dim();
        let mut params = ParamSet::new();
        let tok_emb = params.add_uniform("tok_emb", vec![config.vocab, d], 0.05, rng);
        let pos_emb = params.add_uniform("pos_emb", vec![config.max_len, d], 0.05, rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                heads.push(HeadHandles {
                    wq: params.add_xavier(format!("block{l}.head{h}.wq"), d, dk, rng),
                    wk: params.add_xavier(format!("block{l}.head{h}.wk"), d, dk, rng),
                    wv: params.add_xavier(format!("block{l}.head{h}.wv"), d, dk, rng),
                    wo: params.add_xavier(format!("block{l}.head{h}.wo"), dk, d, rng),
                });
            }
            blocks.push(BlockHandles {
                heads,
                ln1_gain: params.add_ones(format!("block{l}.ln1.gain"), vec![1, d]),
                ln1_bias: params.add_zeros(format!("block{l}.ln1.bias"), vec![1, d]),
                ff_w1: params.add_xavier(format!("block{l}.ff.w1"), d, config.ff, rng),
                ff_b1: params.add_zeros(format!("block{l}.ff.b1"), vec![1, config.ff]),
                ff_w2: params.add_xavier(format!("block{l}.ff.w2"), config.ff, d, rng),
                ff_b2: params.add_zeros(format!("block{l}.ff.b2"), vec![1, d]),
                ln2_gain: params.add_ones(format!("block{l}.ln2.gain"), vec![1, d]),
                ln2_bias: params.add_zeros(format!("block{l}.ln2.bias"), vec![1, d]),
            });
        }
        let out_proj = params.add_xavier("out_proj", d, config.vocab, rng);
        LmModel { config, params, tok_emb, pos_emb, blocks, out_proj }
    }

    /// Rebuilds a model around checkpoint parameters (names must match).
    pub fn from_params(config: LmConfig, params: ParamSet<T>) -> Result<Self, String> {
        let mut fresh = LmModel::new(config, &mut Rng::new(0));
        for (name, tensor) in fresh.params.iter_mut() {
            let src = params
                .by_name(name)
                .ok_or_else(|| format!("checkpoint is missing parameter {name}"))?;
            let loaded = params.tensor(src);
            if loaded.shape() != tensor.shape() {
                return Err(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                ));
            }
            tensor.data_mut().copy_from_slice(loaded.data());
        }
        Ok(fresh)
    }

    /// Teacher-forced logits for every input position under the given mask.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[usize],
        mask: &AttentionMask,
    ) -> Result<Var, NumError> {
        if tokens.len() != mask.size {
            return Err(NumError::ShapeMismatch {
                op: "forward_logits",
                detail: format!("{} tokens vs mask size {}", tokens.len(), mask.size),
            });
        }
        if tokens.len() > self.config.max_len {
            return Err(NumError::ShapeMismatch {
                op: "forward_logits",
                detail: format!(
                    "{} tokens exceed positional table of {}",
                    tokens.len(),
                    self.config.max_len
                ),
            });
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let emb = tape.embedding_lookup(bound.var(self.tok_emb), tokens)?;
        let pos = tape.embedding_lookup(bound.var(self.pos_emb), &positions)?;
        let mut x = tape.add(emb, pos)?;

        let scale = T::from_f64(1.0 / (self.config.head_dim() as f64).sqrt());
        for block in &self.blocks {
            let mut attn: Option<Var> = None;
            for head in &block.heads {
                let q = tape.matmul(x, bound.var(head.wq))?;
                let k = tape.matmul(x, bound.var(head.wk))?;
                let v = tape.matmul(x, bound.var(head.wv))?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, scale);
                let probs = tape.masked_softmax(scores, mask.as_slice())?;
                let ctx = tape.matmul(probs, v)?;
                let head_out = tape.matmul(ctx, bound.var(head.wo))?;
                attn = Some(match attn {
                    None => head_out,
                    Some(acc) => tape.add(acc, head_out)?,
                });
            }
            let attn = attn.expect("at least one head");
            let res = tape.add(x, attn)?;
            x = tape.layernorm(res, bound.var(block.ln1_gain), bound.var(block.ln1_bias))?;

            let h = tape.matmul(x, bound.var(block.ff_w1))?;
            let h = tape.add_bias(h, bound.var(block.ff_b1))?;
            let h = tape.relu(h);
            let ff = tape.matmul(h, bound.var(block.ff_w2))?;
            let ff = tape.add_bias(ff, bound.var(block.ff_b2))?;
            let res = tape.add(x, ff)?;
            x = tape.layernorm(res, bound.var(block.ln2_gain), bound.var(block.ln2_bias))?;
        }
        tape.matmul(x, bound.var(self.out_proj))
    }

    /// Teacher-forced negative log-likelihood of the future tokens: inputs
    /// are tokens[0..o+p-1], cross-entropy is taken only at positions whose
    /// target index is >= o, averaged over those p positions.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
        kind: MaskKind,
    ) -> Result<Var, NumError> {
        if seq.p == 0 {
            return Err(NumError::ShapeMismatch {
                op: "lm_loss",
                detail: "future suffix must be non-empty".into(),
            });
        }
        let len = seq.len() - 1;
        let inputs = &seq.tokens[..len];
        let mask = AttentionMask::for_prefix(kind, seq.o, len)?;
        let logits = self.forward_logits(tape, bound, inputs, &mask)?;
        let targets = &seq.tokens[1..];
        let weights: Vec<T> = (0..len)
            .map(|i| if i + 1 >= seq.o { T::one() } else { T::zero() })
            .collect();
        tape.cross_entropy(logits, targets, &weights)
    }

    /// Loss value without gradient tracking (tape path; the fast pure path
    /// lives in [`infer`]).
    pub fn lm_loss(&self, seq: &TokenSequence, kind: MaskKind) -> T {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &bound, seq, kind).expect("lm loss");
        tape.scalar(loss)
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semi_causal_rows_match_enumeration() {
        // o=2, p=2: allowed key sets per query row.
        let mask = AttentionMask::semi_causal(2, 2).unwrap();
        let expect: [&[usize]; 4] = [&[0, 1], &[0, 1], &[0, 1, 2], &[0, 1, 2, 3]];
        for (i, keys) in expect.iter().enumerate() {
            for j in 0..4 {
                assert_eq!(mask.allows(i, j), keys.contains(&j), "query {i} key {j}");
            }
        }
    }

    #[test]
    fn no_future_keys_means_all_allowed() {
        let mask = AttentionMask::semi_causal(4, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!(mask.allows(i, j));
            }
        }
    }

    #[test]
    fn causal_is_lower_triangular() {
        let mask = AttentionMask::causal(5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(mask.allows(i, j), i >= j);
            }
        }
    }

    #[test]
    fn zero_observed_prefix_rejected() {
        assert!(AttentionMask::semi_causal(0, 3).is_err());
    }

    #[test]
    fn mask_invariants_hold_exhaustively() {
        for o in 1..=16 {
            for p in 0..=16 {
                let mask = AttentionMask::semi_causal(o, p).unwrap();
                let s = o + p;
                for i in 0..s {
                    let mut any = false;
                    for j in 0..s {
                        let allowed = mask.allows(i, j);
                        if j < o {
                            assert!(allowed, "observed key {j} must be globally visible");
                        } else {
                            assert_eq!(allowed, i >= j, "future key {j} query {i}");
                        }
                        any |= allowed;
                    }
                    assert!(any, "row {i} has no allowed entries");
                }
            }
        }
    }

    #[test]
    fn uniform_model_loss_is_ln_vocab() {
        // Zeroed parameters give identical logits everywhere.
        let mut rng = Rng::new(1);
        let mut model = LmModel::<f64>::new(LmConfig::default(), &mut rng);
        for (_, t) in model.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let seq = TokenSequence::new(vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10], 4, 6);
        let loss = model.lm_loss(&seq, MaskKind::SemiCausal);
        assert!((loss - 64.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_counts_future_positions_only() {
        // lm_loss must equal the mean NLL taken over the p future targets
        // alone, recomputed here from the raw logits.
        let mut rng = Rng::new(7);
        let model = LmModel::<f64>::new(LmConfig::default(), &mut rng);
        let seq = TokenSequence::new(vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10], 4, 6);
        let loss = model.lm_loss(&seq, MaskKind::SemiCausal);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let len = seq.len() - 1;
        let mask = AttentionMask::for_prefix(MaskKind::SemiCausal, seq.o, len).unwrap();
        let logits = model.forward_logits(&mut tape, &bound, &seq.tokens[..len], &mask).unwrap();
        let vocab = model.config.vocab;
        let mut manual = 0.0;
        for i in 0..len {
            let target = seq.tokens[i + 1];
            if i + 1 < seq.o {
                continue;
            }
            let row = &tape.data(logits)[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            manual += lse - row[target];
        }
        manual /= seq.p as f64;
        assert!((loss - manual).abs() < 1e-12, "{loss} vs {manual}");
    }

    #[test]
    fn blocked_positions_get_zero_attention() {
        // Probe: with the semi-causal mask, attention weights at blocked
        // (i, j) are exactly zero in every head of every block. Verified
        // through masked_softmax's contract on a direct scores matrix here;
        // the model-level probe lives in the acceptance suite.
        let mask = AttentionMask::semi_causal(2, 3).unwrap();
        let mut tape = Tape::<f32>::new();
        let scores = tape.constant(vec![5, 5], (0..25).map(|i| i as f32 * 0.1).collect());
        let probs = tape.masked_softmax(scores, mask.as_slice()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if !mask.allows(i, j) {
                    assert_eq!(tape.data(probs)[i * 5 + j], 0.0);
                }
            }
        }
    }
}
